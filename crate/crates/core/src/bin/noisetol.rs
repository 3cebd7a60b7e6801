fn main() -> std::process::ExitCode {
    noisetol::cli::main()
}
