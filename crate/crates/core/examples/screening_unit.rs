//! Screens a few batches of completions and prints each verdict.

use memshape::gridworld::Family;
use memshape::guidance::{screen, Completion, ScreeningMode};

fn with_probs(text: &str, probs: &[f64]) -> Completion {
    Completion { text: text.into(), logprobs: Some(probs.iter().map(|p| p.ln()).collect()) }
}

fn plain(text: &str) -> Completion {
    Completion { text: text.into(), logprobs: None }
}

fn main() {
    let a = "subgoal: go to key\nplan: forward, forward, pickup";
    let b = "subgoal: go to key\nplan: turn-left, forward";
    let c = "control: toggle";
    let cases: Vec<(&str, Vec<Completion>, ScreeningMode)> = vec![
        ("likelihood, probs [0.5, 0.5]", vec![with_probs(a, &[0.5, 0.5])], ScreeningMode::Auto),
        ("likelihood, probs [0.9, 0.9, 0.9]", vec![with_probs(a, &[0.9, 0.9, 0.9])], ScreeningMode::Auto),
        ("consistency, [A, A, B]", vec![plain(a), plain(a), plain(b)], ScreeningMode::Auto),
        ("consistency, [A, B, C]", vec![plain(a), plain(b), plain(c)], ScreeningMode::Auto),
        ("disabled, [garbage, C]", vec![plain("no idea"), plain(c)], ScreeningMode::Disabled),
    ];
    for (name, completions, mode) in cases {
        match screen(&completions, Family::Grid, "example", mode) {
            Ok(v) => {
                let score = v.screening.map_or("-".to_string(), |s| format!("{:.3}", s.score));
                let kept = v.suggestion.map_or("rejected".to_string(), |s| format!("accepted {}", s.canonical_key()));
                println!("{name:<36} score {score:<6} confidence {:.3}  {kept}", v.confidence);
            }
            Err(e) => println!("{name:<36} error: {e}"),
        }
    }
}
