fn main() {
    std::process::exit(riscade::harness::run(std::env::args_os()));
}
