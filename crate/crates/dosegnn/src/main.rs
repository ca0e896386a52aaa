fn main() {
    dosegnn::cli::main();
}
