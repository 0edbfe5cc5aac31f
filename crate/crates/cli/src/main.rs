fn main() -> std::process::ExitCode {
    deepcox_cli::main_with_args(std::env::args_os())
}
