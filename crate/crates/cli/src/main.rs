fn main() {
    let code = edgepipe::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
