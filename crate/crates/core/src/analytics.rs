//! Static cost analysis of decoded architectures: construction plans,
//! parameter counts and multiply-add counts.
//!
//! Counting rules: a convolution has k²·(C_in/groups)·C_out weights plus
//! C_out if it has a bias; batch norm has 2·C; pooling, resizing, identity
//! and additions are free. A convolution costs k²·(C_in/groups)·C_out
//! multiply-adds per output pixel; dilation does not change either count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microtensor::ParamStore;
use crate::relaxation::SuperNet;
use crate::relaxation::{atrous_rate, NetConfig};
use crate::search_space::{
    build_trellis, validate_path, CellGenotype, Downsample, NetworkPath, OperatorKind,
};

/// Output resolution of a layer relative to the input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spatial {
    /// Input size divided by this factor.
    Factor(usize),
    /// 1×1 after global pooling.
    Global,
}

impl Spatial {
    fn pixels(self, h: usize, w: usize) -> u64 {
        match self {
            Spatial::Factor(f) => ((h / f) * (w / f)) as u64,
            Spatial::Global => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm,
    /// Parameter-free operators (pooling, identity, resizing).
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Stem,
    Body,
    Head,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub section: Section,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub out: Spatial,
}

impl LayerSpec {
    pub fn conv(
        name: impl Into<String>,
        section: Section,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        out: Spatial,
    ) -> Self {
        Self {
            name: name.into(),
            section,
            kind: LayerKind::Conv {
                kernel,
                stride: 1,
                dilation: 1,
                groups: 1,
                bias: false,
            },
            c_in,
            c_out,
            out,
        }
    }

    pub fn with_bias(mut self) -> Self {
        if let LayerKind::Conv { bias, .. } = &mut self.kind {
            *bias = true;
        }
        self
    }

    fn with_geometry(mut self, s: usize, d: usize, g: usize) -> Self {
        if let LayerKind::Conv {
            stride,
            dilation,
            groups,
            ..
        } = &mut self.kind
        {
            (*stride, *dilation, *groups) = (s, d, g);
        }
        self
    }

    pub fn batch_norm(name: impl Into<String>, section: Section, c: usize, out: Spatial) -> Self {
        Self {
            name: name.into(),
            section,
            kind: LayerKind::BatchNorm,
            c_in: c,
            c_out: c,
            out,
        }
    }

    pub fn free(name: impl Into<String>, section: Section, c: usize, out: Spatial) -> Self {
        Self {
            name: name.into(),
            section,
            kind: LayerKind::Free,
            c_in: c,
            c_out: c,
            out,
        }
    }

    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv {
                kernel,
                groups,
                bias,
                ..
            } => {
                (kernel * kernel * (self.c_in / groups) * self.c_out
                    + if bias { self.c_out } else { 0 }) as u64
            }
            LayerKind::BatchNorm => 2 * self.c_out as u64,
            LayerKind::Free => 0,
        }
    }

    pub fn multiply_adds(&self, h: usize, w: usize) -> u64 {
        match self.kind {
            LayerKind::Conv { kernel, groups, .. } => {
                (kernel * kernel * (self.c_in / groups) * self.c_out) as u64 * self.out.pixels(h, w)
            }
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsppVariant {
    /// 1×1, one 3×3 atrous branch and image pooling.
    #[default]
    ThreeBranch,
    /// 1×1, three 3×3 atrous branches and image pooling.
    FiveBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Three 3×3 conv → BN → ReLU with strides (2, 1, 2) and 64, 64, 128 filters.
    #[default]
    Final,
    /// The two stride-2 convolutions used during search.
    Search,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlanOptions {
    pub stem: StemKind,
    pub aspp: AsppVariant,
    /// Adds a low-level-feature decoder for counting purposes.
    pub decoder_stub: bool,
    pub in_channels: usize,
}

impl PlanOptions {
    pub fn final_model() -> Self {
        Self {
            in_channels: 3,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConv {
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyNode {
    pub layer: usize,
    pub factor: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub factor: usize,
    pub channels: usize,
    pub aspp: AsppVariant,
    /// Bilinear upsampling factor from the head to the input resolution.
    pub upsample_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalModelPlan {
    pub cell: CellGenotype,
    pub path: NetworkPath,
    pub filter_multiplier: usize,
    pub num_classes: usize,
    pub options: PlanOptions,
    pub stem: Vec<StemConv>,
    pub body: Vec<BodyNode>,
    pub head: HeadPlan,
    /// Every layer in construction order.
    pub layers: Vec<LayerSpec>,
}

pub const FINAL_STEM: [StemConv; 3] = [
    StemConv {
        kernel: 3,
        stride: 2,
        filters: 64,
    },
    StemConv {
        kernel: 3,
        stride: 1,
        filters: 64,
    },
    StemConv {
        kernel: 3,
        stride: 2,
        filters: 128,
    },
];

const DECODER_LOW_LEVEL: usize = 48;

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn conv_bn(
        &mut self,
        name: &str,
        section: Section,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        out: Spatial,
    ) {
        self.layers.push(
            LayerSpec::conv(format!("{name}.w"), section, c_in, c_out, k, out)
                .with_geometry(stride, dilation, 1),
        );
        self.layers.push(LayerSpec::batch_norm(
            format!("{name}.bn"),
            section,
            c_out,
            out,
        ));
    }

    /// Resolution chain from `from` (with `c_from` channels) to `to`.
    fn connector(
        &mut self,
        prefix: &str,
        from: Downsample,
        to: Downsample,
        c_from: usize,
        ch: &dyn Fn(Downsample) -> usize,
    ) {
        let multi = from.index().abs_diff(to.index()) > 1;
        let (mut cur, mut c, mut k) = (from, c_from, 0);
        while cur != to {
            let name = if multi {
                format!("{prefix}.step{k}")
            } else {
                prefix.to_string()
            };
            let next = if cur < to { cur.coarser() } else { cur.finer() }
                .expect("target factor lies in range");
            let out = Spatial::Factor(next.factor());
            if cur < to {
                self.conv_bn(&name, Section::Body, c, ch(next), 3, 2, 1, out);
            } else {
                self.layers
                    .push(LayerSpec::free(format!("{name}.up"), Section::Body, c, out));
                self.conv_bn(&name, Section::Body, c, ch(next), 1, 1, 1, out);
            }
            (cur, c, k) = (next, ch(next), k + 1);
        }
    }
}

/// Construction plan for the decoded architecture at filter multiplier `F`.
pub fn build_final_plan(
    cell: &CellGenotype,
    path: &NetworkPath,
    filter_multiplier: usize,
    num_classes: usize,
    options: PlanOptions,
) -> Result<FinalModelPlan> {
    let blocks = cell.blocks.len();
    cell.validate(blocks)?;
    if path.is_empty() {
        return Err(Error::validation("path has no layers"));
    }
    validate_path(path, &build_trellis(path.len())?).into_result()?;
    let config = NetConfig {
        in_channels: options.in_channels,
        ..NetConfig::new(path.len(), blocks, filter_multiplier, num_classes)
    };
    config
        .validate()
        .map_err(|e| Error::validation(e.to_string()))?;
    let ch = |s: Downsample| config.node_channels(s);
    let mut b = Builder { layers: Vec::new() };

    let stem: Vec<StemConv> = match options.stem {
        StemKind::Final => FINAL_STEM.to_vec(),
        StemKind::Search => vec![
            StemConv {
                kernel: 3,
                stride: 2,
                filters: config.stem_mid_channels(),
            },
            StemConv {
                kernel: 3,
                stride: 2,
                filters: ch(Downsample::X4),
            },
        ],
    };
    let (mut c, mut factor) = (options.in_channels, 1);
    for (i, sc) in stem.iter().enumerate() {
        factor *= sc.stride;
        b.conv_bn(
            &format!("stem.{i}"),
            Section::Stem,
            c,
            sc.filters,
            sc.kernel,
            sc.stride,
            1,
            Spatial::Factor(factor),
        );
        c = sc.filters;
    }
    let stem_channels = c;

    let state = |l: usize| {
        if l == 0 {
            Downsample::X4
        } else {
            path.resolutions[l - 1]
        }
    };
    let state_channels = |l: usize| {
        if l == 0 {
            stem_channels
        } else {
            ch(path.resolutions[l - 1])
        }
    };
    let mut body = Vec::with_capacity(path.len());
    for l in 1..=path.len() {
        let s = state(l);
        let (cn, cb) = (ch(s), config.block_channels(s));
        let out = Spatial::Factor(s.factor());
        let prefix = format!("l{l}.s{}", s.factor());
        // inputs arriving at factor s keep their own channel count when no
        // connector is needed
        let c_prev = if state(l - 1) == s {
            state_channels(l - 1)
        } else {
            ch(s)
        };
        b.connector(
            &format!("{prefix}.in{}", state(l - 1).factor()),
            state(l - 1),
            s,
            state_channels(l - 1),
            &ch,
        );
        let pp_layer = l.saturating_sub(2);
        let c_pp = if state(pp_layer) == s {
            state_channels(pp_layer)
        } else {
            ch(s)
        };
        b.connector(
            &format!("{prefix}.pp{}", state(pp_layer).factor()),
            state(pp_layer),
            s,
            state_channels(pp_layer),
            &ch,
        );
        b.conv_bn(
            &format!("{prefix}.cell.pre0"),
            Section::Body,
            c_pp,
            cb,
            1,
            1,
            1,
            out,
        );
        b.conv_bn(
            &format!("{prefix}.cell.pre1"),
            Section::Body,
            c_prev,
            cb,
            1,
            1,
            1,
            out,
        );
        for (bi, g) in cell.blocks.iter().enumerate() {
            for (j, op) in [(g.input1, g.op1), (g.input2, g.op2)] {
                let name = format!("{prefix}.cell.b{bi}.j{j}.{}", op.name());
                match op.conv_geometry() {
                    Some((k, d)) => {
                        b.layers.push(
                            LayerSpec::conv(format!("{name}.dw"), Section::Body, cb, cb, k, out)
                                .with_geometry(1, d, cb),
                        );
                        b.layers.push(LayerSpec::conv(
                            format!("{name}.pw"),
                            Section::Body,
                            cb,
                            cb,
                            1,
                            out,
                        ));
                        b.layers.push(LayerSpec::batch_norm(
                            format!("{name}.bn"),
                            Section::Body,
                            cb,
                            out,
                        ));
                    }
                    None if op == OperatorKind::Zero => {}
                    None => b.layers.push(LayerSpec::free(name, Section::Body, cb, out)),
                }
            }
        }
        body.push(BodyNode {
            layer: l,
            factor: s.factor(),
            channels: cn,
        });
    }

    let last = state(path.len());
    let hc = ch(last);
    let out = Spatial::Factor(last.factor());
    let hp = format!("head.s{}", last.factor());
    b.conv_bn(
        &format!("{hp}.conv1x1"),
        Section::Head,
        hc,
        hc,
        1,
        1,
        1,
        out,
    );
    let rates: Vec<usize> = match options.aspp {
        AsppVariant::ThreeBranch => vec![atrous_rate(last)],
        AsppVariant::FiveBranch => [6, 12, 18]
            .iter()
            .map(|r| (r * 16 / last.factor()).max(1))
            .collect(),
    };
    for (i, r) in rates.iter().enumerate() {
        let name = if rates.len() == 1 {
            format!("{hp}.atrous")
        } else {
            format!("{hp}.atrous{i}")
        };
        b.conv_bn(&name, Section::Head, hc, hc, 3, 1, *r, out);
    }
    b.layers.push(LayerSpec::free(
        format!("{hp}.pool"),
        Section::Head,
        hc,
        Spatial::Global,
    ));
    b.layers.push(LayerSpec::conv(
        format!("{hp}.pool.w"),
        Section::Head,
        hc,
        hc,
        1,
        Spatial::Global,
    ));
    let branches = rates.len() + 2;
    if options.decoder_stub {
        b.conv_bn(
            &format!("{hp}.proj"),
            Section::Head,
            branches * hc,
            hc,
            1,
            1,
            1,
            out,
        );
        let low = Spatial::Factor(4);
        b.layers
            .push(LayerSpec::free("decoder.up", Section::Decoder, hc, low));
        b.conv_bn(
            "decoder.low",
            Section::Decoder,
            stem_channels,
            DECODER_LOW_LEVEL,
            1,
            1,
            1,
            low,
        );
        b.conv_bn(
            "decoder.fuse0",
            Section::Decoder,
            hc + DECODER_LOW_LEVEL,
            hc,
            3,
            1,
            1,
            low,
        );
        b.conv_bn("decoder.fuse1", Section::Decoder, hc, hc, 3, 1, 1, low);
        b.layers.push(
            LayerSpec::conv("decoder.cls.w", Section::Decoder, hc, num_classes, 1, low).with_bias(),
        );
        b.layers.push(LayerSpec::free(
            "decoder.resize",
            Section::Decoder,
            num_classes,
            Spatial::Factor(1),
        ));
    } else {
        b.layers.push(
            LayerSpec::conv(
                format!("{hp}.proj.w"),
                Section::Head,
                branches * hc,
                num_classes,
                1,
                out,
            )
            .with_bias(),
        );
        b.layers.push(LayerSpec::free(
            format!("{hp}.resize"),
            Section::Head,
            num_classes,
            Spatial::Factor(1),
        ));
    }
    let upsample_ratio = if options.decoder_stub {
        4
    } else {
        last.factor()
    };

    Ok(FinalModelPlan {
        cell: cell.clone(),
        path: path.clone(),
        filter_multiplier,
        num_classes,
        options,
        stem,
        body,
        head: HeadPlan {
            factor: last.factor(),
            channels: hc,
            aspp: options.aspp,
            upsample_ratio,
        },
        layers: b.layers,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub name: String,
    pub section: Section,
    pub params: u64,
    pub multiply_adds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: u64,
    pub multiply_adds: u64,
    pub input_h: usize,
    pub input_w: usize,
    pub rows: Vec<StatsRow>,
}

fn check_input(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "input {h}x{w} is not a positive multiple of 32"
        )));
    }
    Ok(())
}

pub fn count_params(plan: &FinalModelPlan) -> u64 {
    plan.layers.iter().map(LayerSpec::params).sum()
}

pub fn count_multiply_adds(plan: &FinalModelPlan, h: usize, w: usize) -> Result<u64> {
    check_input(h, w)?;
    Ok(plan.layers.iter().map(|l| l.multiply_adds(h, w)).sum())
}

/// Per-layer breakdown over an arbitrary layer list.
pub fn stats_for_layers(layers: &[LayerSpec], h: usize, w: usize) -> Result<ModelStats> {
    check_input(h, w)?;
    let rows: Vec<StatsRow> = layers
        .iter()
        .map(|l| StatsRow {
            name: l.name.clone(),
            section: l.section,
            params: l.params(),
            multiply_adds: l.multiply_adds(h, w),
        })
        .collect();
    Ok(ModelStats {
        params: rows.iter().map(|r| r.params).sum(),
        multiply_adds: rows.iter().map(|r| r.multiply_adds).sum(),
        input_h: h,
        input_w: w,
        rows,
    })
}

pub fn model_stats(plan: &FinalModelPlan, h: usize, w: usize) -> Result<ModelStats> {
    stats_for_layers(&plan.layers, h, w)
}

/// Weight elements of a supernet (architecture parameters excluded).
pub fn supernet_param_count(config: &NetConfig) -> Result<u64> {
    let mut store = ParamStore::new();
    SuperNet::new(config.clone(), &mut store, 0)?;
    Ok(store.numel(Some(crate::microtensor::ParamGroup::Weights)) as u64)
}

impl ModelStats {
    pub fn section_params(&self, section: Section) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.section == section)
            .map(|r| r.params)
            .sum()
    }

    pub fn section_multiply_adds(&self, section: Section) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.section == section)
            .map(|r| r.multiply_adds)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned text table with a total line.
    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<7}  {:>14}  {:>18}",
            "layer", "section", "params", "multiply_adds"
        );
        for r in &self.rows {
            let section = match r.section {
                Section::Stem => "stem",
                Section::Body => "body",
                Section::Head => "head",
                Section::Decoder => "decoder",
            };
            let _ = writeln!(
                s,
                "{:<name_w$}  {:<7}  {:>14}  {:>18}",
                r.name, section, r.params, r.multiply_adds
            );
        }
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<7}  {:>14}  {:>18}",
            "total", "", self.params, self.multiply_adds
        );
        let _ = writeln!(s, "input {}x{}", self.input_h, self.input_w);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_rules() {
        let c = LayerSpec::conv("c", Section::Body, 4, 8, 1, Spatial::Factor(1)).with_bias();
        assert_eq!(c.params(), 40);
        let c = LayerSpec::conv("c", Section::Body, 4, 8, 1, Spatial::Factor(1));
        assert_eq!(c.multiply_adds(8, 8), 2048);
        let dw = LayerSpec::conv("dw", Section::Body, 8, 8, 3, Spatial::Factor(1))
            .with_geometry(1, 2, 8);
        let pw = LayerSpec::conv("pw", Section::Body, 8, 8, 1, Spatial::Factor(1));
        assert_eq!(dw.params() + pw.params(), 136);
        assert_eq!(dw.multiply_adds(4, 4), 72 * 16);
        assert_eq!(
            LayerSpec::free("zero", Section::Body, 8, Spatial::Factor(1)).multiply_adds(64, 64),
            0
        );
        assert_eq!(
            LayerSpec::batch_norm("bn", Section::Body, 8, Spatial::Factor(1)).params(),
            16
        );
    }
}
