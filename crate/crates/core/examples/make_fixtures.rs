//! Regenerates `resources/fixtures/replay.jsonl`, the scripted model outputs
//! used by the end-to-end tests.
//!
//! The outputs are synthetic: a seeded simulation of noisy classifiers in
//! the formats real models produce. Re-run this whenever preprocessing,
//! splitting or prompt rendering changes, since those change the digests.
//!
//!     cargo run -p ct-harness --example make_fixtures

use std::io::Write;
use std::path::Path;

use ct_harness::cli::{prepare, sample, FewShotRef, RunConfig, RunSettings};
use ct_harness::gateway::{FixtureEntry, FixtureStatus, TokenUsage};
use ct_harness::prompt_kit::{DefinitionVariant, Task};
use ct_harness::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Plan {
    model: &'static str,
    task: Task,
    definition: DefinitionVariant,
    split: &'static str,
    few_shot_set: Option<usize>,
    accuracy: f64,
}

const PLANS: [Plan; 6] = [
    Plan { model: "gpt4", task: Task::ZeroShotProbabilistic, definition: DefinitionVariant::Custom, split: "validation", few_shot_set: None, accuracy: 0.0 },
    Plan { model: "gpt4", task: Task::ZeroShotProbabilistic, definition: DefinitionVariant::Custom, split: "test", few_shot_set: None, accuracy: 0.0 },
    Plan { model: "gpt4", task: Task::ZeroShotBinary, definition: DefinitionVariant::Custom, split: "test", few_shot_set: None, accuracy: 0.9 },
    Plan { model: "gpt35", task: Task::ZeroShotBinary, definition: DefinitionVariant::Custom, split: "test", few_shot_set: None, accuracy: 0.75 },
    Plan { model: "llama2", task: Task::ZeroShotBinary, definition: DefinitionVariant::Custom, split: "test", few_shot_set: None, accuracy: 0.7 },
    Plan { model: "gpt4", task: Task::FewShotBinary, definition: DefinitionVariant::None, split: "test", few_shot_set: Some(0), accuracy: 0.8 },
];

fn binary_output(rng: &mut ChaCha8Rng, say_yes: bool, llama: bool) -> String {
    let (yes, no) = if llama {
        (["a) Yes", " Yes\n", "Ja.", "Answer: Yes"], ["b) No", " No\n", "Nein.", "Answer: No"])
    } else {
        (["Yes", "Yes", "Yes", "Yes."], ["No", "No", "No", "No."])
    };
    if llama && rng.random_bool(0.1) {
        return "I am not able to determine this.".into();
    }
    let pool = if say_yes { yes } else { no };
    pool[rng.random_range(0..pool.len())].to_string()
}

fn score_output(rng: &mut ChaCha8Rng, gold: Label) -> String {
    let steps = match gold {
        Label::Positive => rng.random_range(11..=19),
        Label::Negative => rng.random_range(1..=14),
    };
    let score = steps as f64 * 0.05;
    match rng.random_range(0..4) {
        0 => format!("{score:.2}"),
        1 => format!("{score:.1}\n"),
        2 => format!("Score: {score:.2}"),
        _ => format!("{score:.2}").replace('.', ","),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let fixtures = root.join("resources/fixtures");
    let work = tempfile::tempdir()?;
    let data = work.path().join("data");

    let config = RunConfig::load(&fixtures.join("e2e.toml"))?;
    prepare(&config, &data)?;
    let sets_path = data.join("fewshot_sets.json");
    sample(&data, "train", config.sampler.sets, config.sampler.seed, &sets_path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut entries = Vec::new();
    for plan in &PLANS {
        let mut cfg = config.clone();
        cfg.prompt.task = plan.task;
        cfg.prompt.definition = plan.definition;
        cfg.model.profile = plan.model.into();
        cfg.output.split = plan.split.into();
        let mut settings = RunSettings::from_config(&cfg, &data)?;
        settings.few_shot = plan.few_shot_set.map(|set_index| FewShotRef {
            sets: sets_path.clone(),
            set_index,
        });
        let gold = ct_harness::cli::load_split(&data, plan.split)?;
        for (prompt, example) in settings.prompts()?.iter().zip(&gold) {
            let raw = if plan.task.is_probabilistic() {
                score_output(&mut rng, example.label)
            } else {
                let correct = rng.random_bool(plan.accuracy);
                binary_output(&mut rng, example.label.is_positive() == correct, plan.model == "llama2")
            };
            // one scripted rate-limit reply per run exercises the retry path
            if entries.len() % 17 == 3 {
                entries.push(FixtureEntry {
                    digest: prompt.digest(),
                    message_id: Some(prompt.message_id.clone()),
                    raw_output: None,
                    status: FixtureStatus::RateLimited,
                    latency_ms: 0,
                    token_usage: TokenUsage::default(),
                    error: None,
                });
            }
            entries.push(FixtureEntry {
                digest: prompt.digest(),
                message_id: Some(prompt.message_id.clone()),
                raw_output: Some(raw),
                status: FixtureStatus::Ok,
                latency_ms: rng.random_range(200..1500),
                token_usage: TokenUsage {
                    prompt: (prompt.system.len() + prompt.user.len()) as u64 / 4,
                    completion: 2,
                },
                error: None,
            });
        }
    }

    let out = fixtures.join("replay.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
    for e in &entries {
        writeln!(file, "{}", serde_json::to_string(e)?)?;
    }
    file.flush()?;
    println!("wrote {} entries to {}", entries.len(), out.display());
    Ok(())
}
