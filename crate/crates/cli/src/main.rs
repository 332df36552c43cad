fn main() {
    eprintln!("capdet: not yet wired");
    std::process::exit(2);
}
