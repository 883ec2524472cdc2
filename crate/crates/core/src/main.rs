fn main() -> std::process::ExitCode {
    madfair::cli::main()
}
