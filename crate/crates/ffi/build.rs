use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml")).expect("cbindgen.toml");
    match cbindgen::generate_with_config(&crate_dir, config) {
        Ok(bindings) => {
            bindings.write_to_file(crate_dir.join("include/viab_qt.h"));
        }
        // A half-edited source should still let rustc report the real error.
        Err(cbindgen::Error::ParseSyntaxError { .. }) => {
            println!("cargo:warning=cbindgen could not parse src/lib.rs; header not regenerated");
        }
        Err(e) => panic!("cbindgen: {e}"),
    }
}
