fn main() {
    std::process::exit(coco_cli::run(std::env::args_os()));
}
