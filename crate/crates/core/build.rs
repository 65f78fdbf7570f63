use std::process::Command;

fn main() {
    println!("cargo:rerun-if-env-changed=HDF5_DIR");
    if let Ok(dir) = std::env::var("HDF5_DIR") {
        println!("cargo:rustc-link-search=native={dir}/lib");
        println!("cargo:rustc-link-search=native={dir}");
        println!("cargo:rustc-link-lib=dylib=hdf5");
        return;
    }
    let probe = Command::new("pkg-config").args(["--libs", "hdf5"]).output();
    match probe {
        Ok(out) if out.status.success() => {
            let flags = String::from_utf8_lossy(&out.stdout);
            for flag in flags.split_whitespace() {
                if let Some(dir) = flag.strip_prefix("-L") {
                    println!("cargo:rustc-link-search=native={dir}");
                } else if let Some(lib) = flag.strip_prefix("-l") {
                    println!("cargo:rustc-link-lib=dylib={lib}");
                }
            }
        }
        _ => println!("cargo:rustc-link-lib=dylib=hdf5"),
    }
}
