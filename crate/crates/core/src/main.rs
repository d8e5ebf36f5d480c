fn main() {
    plurinet::cli::main()
}
