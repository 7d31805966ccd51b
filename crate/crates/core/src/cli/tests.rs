use serde_json::{json, Value};

use super::*;

fn resolved(command: &str, config: Option<&str>, flags: &[&str]) -> Result<Value> {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["flowrect".to_string(), command.into(), "--out".into(), "run".into()];
    if let Some(text) = config {
        let path = dir.path().join("config.toml");
        fs::write(&path, text).unwrap();
        args.push("--config".into());
        args.push(path.to_string_lossy().into_owned());
    }
    args.extend(flags.iter().map(|s| s.to_string()));
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cli.command.resolve()?.to_json())
}

/// `(pointer, file text, file value, flags, flag value)`
type Case<'a> = (&'a str, &'a str, Value, &'a [&'a str], Value);

fn check_precedence(command: &str, cases: &[Case<'_>]) {
    for (pointer, text, file_value, flags, flag_value) in cases {
        let defaults = resolved(command, None, &[]).unwrap();
        let from_file = resolved(command, Some(text), &[]).unwrap();
        let both = resolved(command, Some(text), flags).unwrap();
        assert_eq!(
            from_file.pointer(pointer),
            Some(file_value),
            "{command} {pointer} from file"
        );
        assert_ne!(
            defaults.pointer(pointer),
            Some(file_value),
            "{command} {pointer} default"
        );
        assert_eq!(
            both.pointer(pointer),
            Some(flag_value),
            "{command} {pointer} flag over file"
        );
    }
}

fn edit_keys(section: &str) -> Vec<(String, String, Value, Vec<&'static str>, Value)> {
    let s = section;
    vec![
        (
            format!("/{s}/lambda"),
            format!("[{s}]\nlambda = 0.25"),
            json!(0.25),
            vec!["--lambda", "0.75"],
            json!(0.75),
        ),
        (
            format!("/{s}/guidance_scale"),
            format!("[{s}]\nguidance_scale = 2.0"),
            json!(2.0),
            vec!["--guidance", "3"],
            json!(3.0),
        ),
        (
            format!("/{s}/num_steps"),
            format!("[{s}]\nnum_steps = 7"),
            json!(7),
            vec!["--steps", "9"],
            json!(9),
        ),
        (
            format!("/{s}/seed"),
            format!("[{s}]\nseed = 11"),
            json!(11),
            vec!["--seed", "12"],
            json!(12),
        ),
        (
            format!("/{s}/solver"),
            format!("[{s}]\nsolver = \"heun\""),
            json!("heun"),
            vec!["--solver", "euler"],
            json!("euler"),
        ),
        (
            format!("/{s}/cache_delta"),
            format!("[{s}]\ncache_delta = 0.25"),
            json!("0.25"),
            vec!["--delta", "inf"],
            json!("inf"),
        ),
        (
            format!("/{s}/cache_delta"),
            format!("[{s}]\ncache_delta = \"inf\""),
            json!("inf"),
            vec!["--no-cache"],
            json!("off"),
        ),
        (
            format!("/{s}/smpi/t_max"),
            format!("[{s}.smpi]\nt_max = 0.5"),
            json!(0.5),
            vec!["--t-max", "0.75"],
            json!(0.75),
        ),
        (
            format!("/{s}/smpi/beta"),
            format!("[{s}.smpi]\nbeta = 0.5"),
            json!(0.5),
            vec!["--beta", "0"],
            json!(0.0),
        ),
        (
            format!("/{s}/smpi/alpha"),
            format!("[{s}.smpi]\nalpha = 0.5"),
            json!(0.5),
            vec!["--alpha", "0.25"],
            json!(0.25),
        ),
        (
            format!("/{s}/smpi/recursive_noise"),
            format!("[{s}.smpi]\nrecursive_noise = true"),
            json!(true),
            vec!["--recursive-noise", "false"],
            json!(false),
        ),
        (
            format!("/{s}/symmetric_guidance"),
            format!("[{s}]\nsymmetric_guidance = true"),
            json!(true),
            vec!["--symmetric-guidance=false"],
            json!(false),
        ),
        (
            format!("/{s}/schedule"),
            format!("[{s}.schedule]\nkind = \"shifted\"\nshift = 2.0"),
            json!({"kind": "shifted", "shift": 2.0}),
            vec!["--shift", "3"],
            json!({"kind": "shifted", "shift": 3.0}),
        ),
    ]
}

fn check_owned(command: &str, cases: Vec<(String, String, Value, Vec<&'static str>, Value)>) {
    for (p, t, fv, f, v) in &cases {
        check_precedence(
            command,
            &[(p.as_str(), t.as_str(), fv.clone(), f.as_slice(), v.clone())],
        );
    }
}

#[test]
fn edit_flags_override_every_file_key() {
    check_precedence(
        "edit",
        &[
            (
                "/model",
                "model = \"a.frct\"",
                json!("a.frct"),
                &["--model", "b.frct"],
                json!("b.frct"),
            ),
            (
                "/src",
                "src = \"a.frct\"",
                json!("a.frct"),
                &["--src", "b.frct"],
                json!("b.frct"),
            ),
            (
                "/edited",
                "edited = \"a.frct\"",
                json!("a.frct"),
                &["--edited", "b.frct"],
                json!("b.frct"),
            ),
            (
                "/target_token",
                "target_token = 1",
                json!(1),
                &["--target-token", "2"],
                json!(2),
            ),
        ],
    );
    check_owned("edit", edit_keys("edit"));
}

#[test]
fn train_flags_override_every_file_key() {
    check_precedence(
        "train",
        &[
            ("/data", "data = \"a\"", json!("a"), &["--data", "b"], json!("b")),
            ("/hidden", "hidden = 8", json!(8), &["--hidden", "12"], json!(12)),
            (
                "/train/steps",
                "[train]\nsteps = 5",
                json!(5),
                &["--steps", "6"],
                json!(6),
            ),
            (
                "/train/learning_rate",
                "[train]\nlearning_rate = 0.5",
                json!(0.5),
                &["--lr", "0.25"],
                json!(0.25),
            ),
            (
                "/train/batch_size",
                "[train]\nbatch_size = 2",
                json!(2),
                &["--batch-size", "3"],
                json!(3),
            ),
            (
                "/train/dropout",
                "[train]\ndropout = 0.5",
                json!(0.5),
                &["--dropout", "0.25"],
                json!(0.25),
            ),
            ("/train/seed", "[train]\nseed = 5", json!(5), &["--seed", "6"], json!(6)),
            (
                "/train/beta1",
                "[train]\nbeta1 = 0.5",
                json!(0.5),
                &["--beta1", "0.25"],
                json!(0.25),
            ),
            (
                "/train/beta2",
                "[train]\nbeta2 = 0.5",
                json!(0.5),
                &["--beta2", "0.25"],
                json!(0.25),
            ),
            (
                "/train/checkpoint_interval",
                "[train]\ncheckpoint_interval = 5",
                json!(5),
                &["--checkpoint-interval", "6"],
                json!(6),
            ),
        ],
    );
}

#[test]
fn gen_data_flags_override_every_file_key() {
    check_precedence(
        "gen-data",
        &[
            ("/seed", "seed = 5", json!(5), &["--seed", "6"], json!(6)),
            ("/clips", "clips = 5", json!(5), &["--clips", "6"], json!(6)),
            ("/suite", "suite = 5", json!(5), &["--suite", "6"], json!(6)),
            (
                "/dataset/size",
                "[dataset]\nsize = 12",
                json!(12),
                &["--size", "20"],
                json!(20),
            ),
            (
                "/dataset/frames",
                "[dataset]\nframes = 4",
                json!(4),
                &["--frames", "5"],
                json!(5),
            ),
            (
                "/dataset/num_classes",
                "[dataset]\nnum_classes = 3",
                json!(3),
                &["--classes", "2"],
                json!(2),
            ),
            (
                "/dataset/radius",
                "[dataset]\nradius = 2",
                json!(2),
                &["--radius", "4"],
                json!(4),
            ),
            (
                "/dataset/max_speed",
                "[dataset]\nmax_speed = 1",
                json!(1),
                &["--max-speed", "3"],
                json!(3),
            ),
            (
                "/dataset/motions",
                "[dataset]\nmotions = [\"rotate-hue\"]",
                json!(["rotate-hue"]),
                &["--motions", "bounce,translate"],
                json!(["bounce", "translate"]),
            ),
            (
                "/dataset/shapes",
                "[dataset]\nshapes = [\"disc\"]",
                json!(["disc"]),
                &["--shapes", "square"],
                json!(["square"]),
            ),
        ],
    );
}

#[test]
fn eval_and_bench_flags_override_every_file_key() {
    check_precedence(
        "eval",
        &[
            ("/video", "video = \"a\"", json!("a"), &["--video", "b"], json!("b")),
            ("/src", "src = \"a\"", json!("a"), &["--src", "b"], json!("b")),
            (
                "/reference",
                "reference = \"a\"",
                json!("a"),
                &["--reference", "b"],
                json!("b"),
            ),
        ],
    );
    check_precedence(
        "ot-bench",
        &[
            ("/steps", "steps = [3]", json!([3]), &["--steps", "4,5"], json!([4, 5])),
            (
                "/lambdas",
                "lambdas = [0.5]",
                json!([0.5]),
                &["--lambdas", "1"],
                json!([1.0]),
            ),
            (
                "/solvers",
                "solvers = [\"heun\"]",
                json!(["heun"]),
                &["--solvers", "euler"],
                json!(["euler"]),
            ),
            ("/seed", "seed = 5", json!(5), &["--seed", "6"], json!(6)),
        ],
    );
    let suite: &[Case<'_>] = &[
        ("/model", "model = \"a\"", json!("a"), &["--model", "b"], json!("b")),
        ("/data", "data = \"a\"", json!("a"), &["--data", "b"], json!("b")),
        ("/cases", "cases = 3", json!(3), &["--cases", "4"], json!(4)),
    ];
    check_precedence("ablate", suite);
    check_precedence(
        "ablate",
        &[(
            "/rows",
            "rows = [\"full\"]",
            json!(["full"]),
            &["--rows", "vanilla,no-cache"],
            json!(["vanilla", "no-cache"]),
        )],
    );
    check_owned("ablate", edit_keys("edit"));
    check_precedence("cache-bench", suite);
    check_precedence(
        "cache-bench",
        &[(
            "/deltas",
            "deltas = [0.5, \"inf\"]",
            json!(["0.5", "inf"]),
            &["--deltas", "off,0"],
            json!(["off", "0"]),
        )],
    );
    check_owned("cache-bench", edit_keys("edit"));
}

#[test]
fn config_file_errors_are_usage_errors() {
    let err = resolved("edit", Some("lamda = 1"), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = resolved("edit", Some("[edit]\nlambda = \"big\""), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn conflicting_flags_name_both() {
    let err = Cli::try_parse_from(["flowrect", "edit", "--out", "r", "--delta", "0.1", "--no-cache"]).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("--delta") && text.contains("--no-cache"), "{text}");
    let err = Cli::try_parse_from(["flowrect", "train", "--out", "r", "--config", "a", "--replay", "b"]).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("--config") && text.contains("--replay"), "{text}");
    assert_eq!(
        main_with_args(["flowrect", "edit", "--out", "r", "--delta", "0.1", "--no-cache"]),
        2
    );
}

#[test]
fn bad_values_and_missing_inputs_exit_with_usage() {
    assert_eq!(main_with_args(["flowrect", "edit", "--out", "r", "--delta", "-1"]), 2);
    assert_eq!(main_with_args(["flowrect", "edit", "--out", "r", "--solver", "rk4"]), 2);
    assert_eq!(main_with_args(["flowrect", "frobnicate"]), 2);
    assert_eq!(main_with_args(["flowrect", "--help"]), 0);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let cli = Cli::try_parse_from(["flowrect", "edit", "--out", &out, "--model", "m.frct"]).unwrap();
    let err = run(&cli).unwrap_err();
    assert!(matches!(&err, Error::Usage(m) if m.contains("--src")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_checkpoint_is_a_setup_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let data = dir.path().join("data");
    let cli = Cli::try_parse_from([
        "flowrect",
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--clips",
        "1",
        "--suite",
        "1",
        "--size",
        "8",
        "--frames",
        "2",
        "--radius",
        "2",
    ])
    .unwrap();
    run(&cli).unwrap();
    let cli = Cli::try_parse_from([
        "flowrect",
        "ablate",
        "--out",
        out.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--model",
        dir.path().join("none.frct").to_str().unwrap(),
    ])
    .unwrap();
    let err = run(&cli).unwrap_err();
    assert!(matches!(err, Error::Setup(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn defaults_are_fully_materialized() {
    let v = resolved("edit", None, &[]).unwrap();
    for p in [
        "/edit/lambda",
        "/edit/smpi/alpha",
        "/edit/cache_delta",
        "/edit/schedule/kind",
    ] {
        assert!(v.pointer(p).is_some(), "{p}");
    }
    let back = Resolved::from_json("edit", v.clone()).unwrap();
    assert_eq!(back.to_json(), v);
    assert!(Resolved::from_json("launch", v).is_err());
}
