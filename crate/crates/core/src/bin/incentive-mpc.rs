fn main() {
    std::process::exit(incentive_mpc::cli::main_with_args(std::env::args_os()));
}
