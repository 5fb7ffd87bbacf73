fn main() -> std::process::ExitCode {
    spinwing::cli::run()
}
