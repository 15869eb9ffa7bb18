fn main() -> std::process::ExitCode {
    latent_codec::cli::main_with_args(std::env::args_os())
}
