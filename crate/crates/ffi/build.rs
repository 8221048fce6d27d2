use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").expect("manifest dir");
    let header = PathBuf::from(&crate_dir).join("include").join("trajepa.h");
    std::fs::create_dir_all(header.parent().expect("include dir")).expect("mkdir include");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("TRAJEPA_H".to_string()),
        documentation: true,
        cpp_compat: true,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            ..Default::default()
        },
        ..cbindgen::Config::default()
    };
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        Err(e) => {
            // Header generation failures should surface but not mask
            // compile errors in the crate itself.
            println!("cargo:warning=cbindgen failed: {e}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
