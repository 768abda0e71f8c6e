fn main() -> std::process::ExitCode {
    attrsets_core::cli::main()
}
