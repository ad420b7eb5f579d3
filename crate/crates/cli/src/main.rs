use clap::Parser;
use ddr_sim::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => println!("{report}"),
        Err(e) => {
            eprintln!("ddr: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
