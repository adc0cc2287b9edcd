fn main() {
    std::process::exit(ebm_sysid::cli::main());
}
