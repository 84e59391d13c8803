fn main() {
    let seed = std::env::var(dpl_cli::run::SEED_VAR).ok();
    std::process::exit(dpl_cli::run::run(std::env::args_os(), seed.as_deref()));
}
