fn main() {
    // placeholder until the pipeline module lands
}
