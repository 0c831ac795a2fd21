use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = vetrial::Cli::parse();
    match vetrial::run(cli) {
        Ok(report) => {
            println!("{}", report.trim_end());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            for cause in err.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
