fn main() {
    std::process::exit(deferral_cli::run(std::env::args_os(), |k| std::env::var(k).ok()));
}
