fn main() -> std::process::ExitCode {
    gaze_attention::cli::main()
}
