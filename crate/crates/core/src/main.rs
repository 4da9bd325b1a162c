mod cli;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = match cli::Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("ERR usage: {first}");
            return ExitCode::from(2);
        }
    };
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, exit) = cli::classify(&e);
            // library errors already embed their source in Display
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain() {
                let m = cause.to_string().replace('\n', " ");
                if !parts.last().is_some_and(|p| p.ends_with(&m)) {
                    parts.push(m);
                }
            }
            let msg = parts.join(": ");
            eprintln!("ERR {code}: {msg}");
            ExitCode::from(exit)
        }
    }
}
