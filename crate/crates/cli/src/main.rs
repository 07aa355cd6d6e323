use clap::Parser;

fn main() {
    // argument mistakes are configuration errors: exit 1, not clap's 2
    let cli = match waspnet_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(err) = waspnet_cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(waspnet_cli::exit_code(&err));
    }
}
