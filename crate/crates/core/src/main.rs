fn main() -> std::process::ExitCode {
    ocunet::cli::main()
}
