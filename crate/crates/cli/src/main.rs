fn main() {
    // Filled in once the pipeline stages land.
}
