fn main() -> std::process::ExitCode {
    salad::cli::main()
}
