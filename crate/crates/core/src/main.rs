fn main() -> std::process::ExitCode {
    nnscore::cli::main()
}
