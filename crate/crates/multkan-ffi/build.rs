fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/multkan.h"));
        }
        // Header generation failures must not break `cargo build` for
        // consumers that only need the library objects.
        Err(err) => println!("cargo:warning=cbindgen skipped: {err}"),
    }
}
