mod common;

#[test]
fn noisy_output_corpus() {
    let cases = common::noisy_cases();
    assert!(cases.len() >= 50);
    let failures: Vec<String> = cases.iter().filter_map(common::check_noisy).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
