fn main() {
    std::process::exit(pgg_act_cli::main_with_args(std::env::args_os()));
}
