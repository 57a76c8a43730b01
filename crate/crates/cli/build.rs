use std::process::Command;

fn main() {
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string());
    if let Some(d) = describe {
        println!("cargo:rustc-env=BHDIMER_GIT_DESCRIBE={d}");
    }
    println!("cargo:rerun-if-changed=build.rs");
}
