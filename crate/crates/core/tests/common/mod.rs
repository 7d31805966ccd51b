//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use flowrect::cli::main_with_args;
use flowrect::cli::manifest::{RunManifest, MANIFEST_FILE};

pub fn flowrect(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("flowrect").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap()
}

/// A generated dataset and a briefly trained model in a temp dir.
pub struct Pipeline {
    _tmp: tempfile::TempDir,
    pub root: PathBuf,
    pub data: PathBuf,
    pub model: PathBuf,
}

impl Pipeline {
    pub fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        let args = [
            "gen-data",
            "--out",
            s(&data),
            "--size",
            "8",
            "--frames",
            "3",
            "--clips",
            "4",
            "--suite",
            "3",
        ];
        assert_eq!(flowrect(&args), 0);
        let run = root.join("train");
        let args = [
            "train",
            "--out",
            s(&run),
            "--data",
            s(&data),
            "--steps",
            "20",
            "--hidden",
            "8",
        ];
        assert_eq!(flowrect(&args), 0);
        Self {
            model: run.join("model.frct"),
            _tmp: tmp,
            root,
            data,
        }
    }

    pub fn case(&self, i: usize) -> PathBuf {
        self.data.join("suite").join(format!("case_{i:04}.frct"))
    }

    /// Edits the first case into `root/name` with 6 steps.
    pub fn edit(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.root.join(name);
        let case = self.case(0);
        let mut args = vec![
            "edit",
            "--out",
            s(&out),
            "--model",
            s(&self.model),
            "--src",
            s(&case),
            "--steps",
            "6",
        ];
        args.extend_from_slice(extra);
        assert_eq!(flowrect(&args), 0);
        out
    }

    /// Runs every command once and returns the run directories.
    pub fn run_all(&self) -> Vec<PathBuf> {
        let edited = self.edit("edit", &[]);
        let video = edited.join("edited.frct");
        let case = self.case(0);
        let (video, case, model, data) = (s(&video), s(&case), s(&self.model), s(&self.data));
        let runs: [(&str, Vec<&str>); 4] = [
            ("eval", vec!["--video", video, "--src", case]),
            ("ablate", vec!["--model", model, "--data", data, "--steps", "4"]),
            ("ot-bench", vec!["--steps", "10,20"]),
            ("cache-bench", vec!["--model", model, "--data", data, "--steps", "4"]),
        ];
        let mut dirs = vec![self.data.clone(), self.root.join("train"), edited];
        for (cmd, extra) in &runs {
            let out = self.root.join(cmd);
            let mut args = vec![*cmd, "--out", s(&out)];
            args.extend(extra);
            assert_eq!(flowrect(&args), 0, "{cmd}");
            dirs.push(out);
        }
        dirs
    }
}

/// Replays the run in `dir` next to it; returns the commands whose output
/// digests changed.
pub fn replay_mismatches(dirs: &[PathBuf]) -> Vec<String> {
    let mut bad = Vec::new();
    for dir in dirs {
        let recorded = manifest(dir);
        let again = dir.with_extension("replay");
        let m = dir.join(MANIFEST_FILE);
        let code = flowrect(&[&recorded.command, "--out", s(&again), "--replay", s(&m)]);
        if code != 0 || !recorded.output_differences(&manifest(&again)).is_empty() {
            bad.push(recorded.command.clone());
        }
    }
    bad
}
