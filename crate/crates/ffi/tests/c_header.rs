//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "evinig.h"

int main(void) {
    EvinigNig a = {0.1, 2.0, 3.0, 1.0};
    EvinigNig b = {-0.2, 1.0, 2.0, 0.5};
    EvinigNig m;
    if (evinig_nig_mix(&a, &b, EVINIG_MIXTURE_SYMMETRIC, &m) != EVINIG_STATUS_OK) return 1;
    if (m.gamma != 3.0 || m.alpha != 5.5) return 2;
    EvinigUncertainty u;
    if (evinig_nig_uncertainty(&a, &u) != EVINIG_STATUS_OK || u.al != 0.5 || u.ep != 0.25) return 3;
    a.alpha = 0.5;
    if (evinig_nig_validate(&a) != EVINIG_STATUS_INVALID_ARGUMENT) return 4;
    if (strstr(evinig_last_error(), "alpha") == NULL) return 5;

    EvinigModelConfig cfg = evinig_model_config_default();
    EvinigModel *model = NULL;
    if (evinig_model_new(&cfg, 1, &model) != EVINIG_STATUS_OK) return 6;
    double i0[144], i1[144], out[144];
    for (int k = 0; k < 144; k++) { i0[k] = 0.4 + 0.001 * k; i1[k] = 0.41 + 0.001 * k; }
    if (evinig_predict(model, i0, i1, 12, 12, 70.0, 71.0, 72.0, out, NULL, NULL, NULL) != EVINIG_STATUS_OK) return 7;
    evinig_model_free(model);
    printf("ok %s\n", evinig_version());
    return 0;
}
"#;

fn profile_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = profile_dir().join("libevinig_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C build failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), format!("ok {}", env!("CARGO_PKG_VERSION")));
}
