use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect(&p, out);
        } else if p.extension().is_some_and(|x| x == "rs" || x == "toml") {
            out.push(p);
        }
    }
}

// Content hash of the sources that make up the binary, recorded in every
// run manifest.
fn main() {
    let here = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let roots = [here.join("src"), here.join("Cargo.toml"), here.join("../core/src"), here.join("../core/Cargo.toml")];
    let mut files = Vec::new();
    for r in &roots {
        println!("cargo:rerun-if-changed={}", r.display());
        if r.is_dir() {
            collect(r, &mut files);
        } else {
            files.push(r.clone());
        }
    }
    let base = here.parent().unwrap().to_path_buf();
    let mut named: Vec<(String, PathBuf)> =
        files.into_iter().map(|p| (p.strip_prefix(&base).unwrap_or(&p).to_string_lossy().replace('\\', "/"), p)).collect();
    named.sort();
    let mut h = Sha256::new();
    for (name, path) in &named {
        let body = fs::read(path).unwrap();
        h.update(name.as_bytes());
        h.update([0]);
        h.update((body.len() as u64).to_le_bytes());
        h.update(&body);
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=STAR_CODE_HASH={hex}");
}
