fn main() -> std::process::ExitCode {
    pft_core::cli::main()
}
