//! Prompt texts are frozen byte-for-byte. Regenerate with FAIRCAP_BLESS=1
//! after an intended template change.

mod common;

use std::path::PathBuf;

use common::{analog, judge_request, patient};
use faircap::judge::render_judge_prompt;
use faircap::prompting::{build_prompt, StrategyKind};

fn check(name: &str, text: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("FAIRCAP_BLESS").is_some() {
        std::fs::write(&path, text).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, expected, "{name} drifted from its golden file");
}

#[test]
fn strategy_prompts_match_golden_files() {
    let p = patient();
    let a = analog();
    for kind in StrategyKind::ALL {
        let prompt = build_prompt(&p, kind, Some(&a)).unwrap();
        assert!(!prompt.text.contains('\r'));
        check(&format!("prompt_{kind}.txt"), &prompt.text);
    }
}

#[test]
fn cap_without_analog_is_the_system2_prompt() {
    let p = patient();
    let cap = build_prompt(&p, StrategyKind::Cap, None).unwrap();
    let s2 = build_prompt(&p, StrategyKind::System2, None).unwrap();
    assert!(cap.fallback);
    assert_eq!(cap.text, s2.text);
}

#[test]
fn judge_prompt_matches_golden_file() {
    check("judge.txt", &render_judge_prompt(&judge_request()));
}
