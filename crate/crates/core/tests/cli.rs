mod common;

use std::fs;
use std::path::Path;

use common::{png_in, run};
use kpp::cli::{SelectionOutput, EXIT_IO, EXIT_USAGE};
use kpp::harness::{read_curves_csv, synth_corpus, CorpusKind, CorpusSpec, Method, CSV_VERSION_LINE};
use kpp::GridSpec;

fn read_selection(path: &Path) -> SelectionOutput {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn select(image: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["select", "--image", image.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn ten_percent_of_a_vit_grid_is_nineteen_patches() {
    let dir = tempfile::tempdir().unwrap();
    let image = png_in(dir.path(), "img.png", 300, 1);
    let out = dir.path().join("sel.json");
    assert_eq!(select(&image, &out, &["--oracle", "meanfill", "--ratio", "0.10", "--init", "central"]), 0);
    let sel = read_selection(&out);
    assert_eq!(sel.chosen.len(), 19);
    assert_eq!(sel.budget.n_keep, 19);
    assert_eq!(sel.chosen[0], 105);
    assert_eq!(sel.grid.n_patches, 196);
    assert_eq!(sel.loss_after.len(), 19);
    assert_eq!(sel.init, "central");
    assert_eq!(sel.oracle, "meanfill");
    let mut distinct = sel.chosen.clone();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(distinct.len(), 19);
}

#[test]
fn full_budget_reaches_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let image = png_in(dir.path(), "img.png", 224, 2);
    let out = dir.path().join("sel.json");
    assert_eq!(select(&image, &out, &["--oracle", "meanfill", "--ratio", "1.0"]), 0);
    let sel = read_selection(&out);
    assert_eq!(sel.chosen.len(), 196);
    assert_eq!(*sel.loss_after.last().unwrap(), 0.0);
}

#[test]
fn lazy_select_matches_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let image = png_in(dir.path(), "img.png", 64, 3);
    let naive = dir.path().join("naive.json");
    let lazy = dir.path().join("lazy.json");
    let grid = ["--image-side", "32", "--patch-side", "8", "--oracle", "meanfill", "--ratio", "0.5"];
    assert_eq!(select(&image, &naive, &grid), 0);
    let mut with_lazy = grid.to_vec();
    with_lazy.push("--lazy");
    assert_eq!(select(&image, &lazy, &with_lazy), 0);
    let (naive, lazy) = (read_selection(&naive), read_selection(&lazy));
    assert_eq!(lazy.method, "kpp_lazy");
    assert_eq!(naive.chosen.len(), 8);
    // Mean-fill is not submodular, so only the shared first pick is guaranteed.
    assert_eq!(naive.chosen[0], lazy.chosen[0]);
}

#[test]
fn select_json_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let image = png_in(dir.path(), "img.png", 96, 4);
    let grid = ["--image-side", "64", "--patch-side", "8", "--ratio", "0.25"];
    let mut outputs = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("t{threads}.json"));
        let mut args = vec!["--threads", threads];
        args.extend_from_slice(&grid);
        assert_eq!(select(&image, &out, &args), 0);
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn explicit_and_absent_init() {
    let dir = tempfile::tempdir().unwrap();
    let image = png_in(dir.path(), "img.png", 32, 5);
    let out = dir.path().join("sel.json");
    let grid = ["--image-side", "32", "--patch-side", "8", "--oracle", "meanfill", "--ratio", "0.25"];
    let mut args = grid.to_vec();
    args.extend_from_slice(&["--init", "7"]);
    assert_eq!(select(&image, &out, &args), 0);
    assert_eq!(read_selection(&out).chosen[0], 7);

    let mut args = grid.to_vec();
    args.extend_from_slice(&["--init", "none"]);
    assert_eq!(select(&image, &out, &args), 0);
    assert_eq!(read_selection(&out).init, "none");

    let mut args = grid.to_vec();
    args.extend_from_slice(&["--init", "16"]);
    assert_eq!(select(&image, &out, &args), EXIT_USAGE);
}

#[test]
fn usage_and_io_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sel.json");
    assert_eq!(select(&dir.path().join("missing.png"), &out, &[]), EXIT_IO);
    let garbage = dir.path().join("garbage.png");
    fs::write(&garbage, b"not an image").unwrap();
    assert_eq!(select(&garbage, &out, &[]), EXIT_IO);
    let image = png_in(dir.path(), "img.png", 32, 6);
    assert_eq!(select(&image, &out, &["--ratio", "0"]), EXIT_USAGE);
    assert_eq!(select(&image, &out, &["--patch-side", "15"]), EXIT_USAGE);
    assert_eq!(select(&image, &out, &["--oracle", "idw", "--alpha=-1"]), EXIT_USAGE);
    let csv = dir.path().join("bad.csv");
    let eval = ["eval", "--budgets", "0.5,1.5", "--image-side", "32", "--patch-side", "8", "--out"];
    let mut args = eval.to_vec();
    args.push(csv.to_str().unwrap());
    assert_eq!(run(&args), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
}

#[test]
fn eval_csv_is_reproducible_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path, svg: &Path, threads: &str| {
        run(&[
            "--threads",
            threads,
            "eval",
            "--count",
            "3",
            "--image-side",
            "32",
            "--patch-side",
            "8",
            "--lazy",
            "--out",
            out.to_str().unwrap(),
            "--svg",
            svg.to_str().unwrap(),
        ])
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let (sa, sb) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    assert_eq!(args(&a, &sa, "1"), 0);
    assert_eq!(args(&b, &sb, "4"), 0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.as_bytes(), fs::read(&b).unwrap());
    assert_eq!(fs::read(&sa).unwrap(), fs::read(&sb).unwrap());

    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
    assert_eq!(
        lines.next(),
        Some("image_id,method,oracle_id,init_policy,budget_ratio,n_keep,seed,masked_mse")
    );
    let rows = read_curves_csv(&text).unwrap();
    // Per image: 4 budgets of kpp, 4 of kpp_lazy, 4 × 5 random.
    assert_eq!(rows.len(), 3 * (4 + 4 + 20));
    assert_eq!(rows.iter().filter(|r| r.method == Method::Random).count(), 60);
    assert!(rows.iter().all(|r| r.masked_mse >= 0.0 && r.oracle_id == "idw:2"));
    assert!(fs::read_to_string(&sa).unwrap().starts_with("<svg"));
}

#[test]
fn eval_at_full_budget_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("full.csv");
    let code = run(&[
        "eval", "--kind", "checker", "--count", "2", "--budgets", "1.0", "--seeds", "0,1",
        "--image-side", "32", "--patch-side", "8", "--oracle", "meanfill", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rows = read_curves_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r.masked_mse == 0.0 && r.n_keep == 16));
}

#[test]
fn directory_corpus_of_five_pngs() {
    let dir = tempfile::tempdir().unwrap();
    for (i, side) in [40u32, 224, 100, 300, 64].into_iter().enumerate() {
        png_in(dir.path(), &format!("img{i}.png"), side, 10 + i as u64);
    }
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let corpus = synth_corpus(&CorpusSpec {
        kind: CorpusKind::Directory(dir.path().to_path_buf()),
        count: 0,
        seed: 0,
        grid: GridSpec::VIT_B16,
    })
    .unwrap();
    assert_eq!(corpus.len(), 5);
    for img in &corpus {
        assert_eq!((img.image.height(), img.image.width(), img.image.channels()), (224, 224, 3));
    }

    let out = dir.path().join("curves.csv");
    let code = run(&[
        "eval", "--corpus", dir.path().to_str().unwrap(), "--budgets", "0.05", "--seeds", "0",
        "--oracle", "meanfill", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rows = read_curves_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 5 * 2);
    assert!(rows.iter().all(|r| r.n_keep == 9));
}

#[test]
fn ablate_writes_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate.csv");
    let code = run(&[
        "ablate", "--count", "2", "--budgets", "0.05,0.5,1.0", "--image-side", "32", "--patch-side", "8",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rows = read_curves_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);
    for init in ["central", "none"] {
        assert_eq!(rows.iter().filter(|r| r.init_policy == init).count(), 6);
    }
    assert!(rows.iter().filter(|r| r.budget_ratio == 1.0).all(|r| r.masked_mse == 0.0));
}

#[test]
fn check_submodular_fixtures_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("violations.csv");
    assert_eq!(run(&["check-submodular", "--fixture", "square", "--out", out.to_str().unwrap()]), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x_set,y_set,element,lhs,rhs,deficit\n"));
    assert!(text.lines().count() > 1);

    assert_eq!(run(&["check-submodular", "--fixture", "coverage", "--out", out.to_str().unwrap()]), 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);

    let image = png_in(dir.path(), "img.png", 48, 7);
    let code = run(&[
        "check-submodular", "--image", image.to_str().unwrap(), "--image-side", "48", "--patch-side", "16",
        "--oracle", "meanfill", "--mode", "sampled", "--trials", "200",
    ]);
    assert_eq!(code, 0);
}
