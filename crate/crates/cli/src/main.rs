fn main() {
    std::process::exit(spreadnet_cli::run(std::env::args_os()));
}
