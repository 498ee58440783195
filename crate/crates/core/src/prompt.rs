//! Planning prompts and the closed prompt corpus.

use rand::Rng;

use crate::geometry::Coordinate3D;
use crate::scene::Scene;
use crate::tokens::{format_coordinate, Vocab, TARGET_PREAMBLE};

/// Objects named in a planning prompt, nearest first.
pub const PROMPT_OBJECTS: usize = 3;

/// Every word the prompt templates can produce.
const CORPUS: &str = "command : go straight turn left right ; objects none car truck at and plan the trajectory \
                      object ahead behind near ego history is parked moving";

/// Vocabulary shared by every model: reserved tokens, numeric characters and corpus words.
pub fn corpus_vocab() -> Vocab {
    Vocab::from_corpus([CORPUS, TARGET_PREAMBLE]).expect("corpus fits the vocabulary limit")
}

/// Rounds to the 0.1 m resolution used in text.
pub fn round_decimeter(v: f64) -> f64 {
    let r = (v * 10.0).round() / 10.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// `command : <cmd> ; objects : <kind> at (x, y) and ... ; plan the trajectory`
pub fn planning_prompt(scene: &Scene) -> String {
    let mut agents: Vec<_> = scene.agents.iter().collect();
    agents.sort_by(|a, b| {
        let da = a.poses[0].position[0].hypot(a.poses[0].position[1]);
        let db = b.poses[0].position[0].hypot(b.poses[0].position[1]);
        da.total_cmp(&db)
    });
    let objects: Vec<String> = agents
        .iter()
        .take(PROMPT_OBJECTS)
        .map(|a| {
            let p = a.poses[0].position;
            let c = Coordinate3D::bev(round_decimeter(p[0]), round_decimeter(p[1]));
            format!("{} at {}", a.kind.name(), format_coordinate(c, true))
        })
        .collect();
    let objects = if objects.is_empty() { "none".to_string() } else { objects.join(" and ") };
    format!("command : {} ; objects : {objects} ; plan the trajectory", scene.command.phrase())
}

fn random_coordinate(rng: &mut impl Rng, three_d: bool) -> String {
    let mut v = || round_decimeter(rng.gen_range(-80.0..80.0));
    let c = Coordinate3D::new(v(), v(), 0.0);
    if three_d {
        let z = round_decimeter(rng.gen_range(-5.0..5.0));
        format_coordinate(Coordinate3D { z, ..c }, false)
    } else {
        format_coordinate(c, true)
    }
}

/// Random sentence from the prompt grammar, mixing ground-plane and 3D coordinates.
pub fn random_prompt<R: Rng>(rng: &mut R) -> String {
    let kinds = ["car", "truck", "object"];
    let commands = ["go straight", "turn left", "turn right"];
    let coord = |rng: &mut R| {
        let three_d = rng.gen_bool(0.3);
        random_coordinate(rng, three_d)
    };
    match rng.gen_range(0..4) {
        0 => {
            let n = rng.gen_range(0..=4);
            let objs: Vec<String> =
                (0..n).map(|_| format!("{} at {}", kinds[rng.gen_range(0..3)], coord(rng))).collect();
            let objs = if objs.is_empty() { "none".into() } else { objs.join(" and ") };
            format!("command : {} ; objects : {objs} ; plan the trajectory", commands[rng.gen_range(0..3)])
        }
        1 => format!("object at {} {}", coord(rng), ["ahead", "behind", "near"][rng.gen_range(0..3)]),
        2 => {
            let n = rng.gen_range(1..=3);
            let pts: Vec<String> = (0..n).map(|_| coord(rng)).collect();
            format!("ego history : {}", pts.join(" "))
        }
        _ => {
            let n = rng.gen_range(1..=6);
            let pts: Vec<String> = (0..n).map(|_| random_coordinate(rng, false)).collect();
            format!("{TARGET_PREAMBLE} {}", pts.join(" "))
        }
    }
}

/// Text that resembles coordinates but falls outside the grammar.
pub fn negative_corpus(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let fixed = [
        "speed 30 km/h at time (noon)",
        "(1, 2, 3, 4)",
        "(3)",
        "[1.0, 2.0]",
        "(1.2.3, 4)",
        "(a, b)",
        "(1,)",
        "(-.5, 1)",
        "(1., 2)",
        "(1e3, 2)",
        "(1; 2)",
        "( , )",
        "2024-05-01 at 12:30",
        "x = 1.5, y = 2.0",
        "(12.4 -3.1)",
        "12.4, -3.1)",
        "(12.4, -3.1",
        "{1.0, 2.0}",
        "(+, -)",
        "(1 2, 3)",
    ];
    let mut out: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    while out.len() < n {
        let a = rng.gen_range(-99.0..99.0f64);
        let b = rng.gen_range(-99.0..99.0f64);
        let s = match rng.gen_range(0..6) {
            0 => format!("({a:.1}, {b:.1}, {a:.1}, {b:.1})"),
            1 => format!("[{a:.1}, {b:.1}]"),
            2 => format!("({a:.1} {b:.1})"),
            3 => format!("{a:.1}, {b:.1}"),
            4 => format!("({a:.1}; {b:.1})"),
            _ => format!("(speed {a:.0}, heading {b:.0})"),
        };
        out.push(s);
    }
    out
}
