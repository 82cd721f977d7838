fn main() -> std::process::ExitCode {
    fuseseg::cli::main()
}
