fn main() {
    let out = std::env::var(avi::cli::OUT_ENV).ok();
    std::process::exit(avi::cli::main(std::env::args_os(), out.as_deref()));
}
