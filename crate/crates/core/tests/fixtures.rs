use std::fs;
use std::path::Path;

use desknmt::fixtures::{bundled_fixture_dir, verify_fixtures};

#[test]
fn bundled_fixtures_all_pass() {
    let report = verify_fixtures(&bundled_fixture_dir()).unwrap();
    assert!(report.fixtures.len() >= 9);
    assert!(report.all_passed(), "{}", report.render());
    let published = report.fixtures.iter().find(|f| f.source == "published").unwrap();
    assert_eq!(published.kind, "overlap-published");
}

#[test]
fn empty_directory_passes_vacuously() {
    let dir = tempfile::tempdir().unwrap();
    let report = verify_fixtures(dir.path()).unwrap();
    assert!(report.fixtures.is_empty());
    assert!(report.all_passed());
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dest = to.join(e.file_name());
        if e.path().is_dir() {
            copy_dir(&e.path(), &dest);
        } else {
            fs::copy(e.path(), dest).unwrap();
        }
    }
}

#[test]
fn missing_provenance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("bleu-hand-case");
    copy_dir(&bundled_fixture_dir().join("bleu-hand-case"), &case);
    assert!(verify_fixtures(dir.path()).unwrap().all_passed());
    fs::remove_file(case.join("provenance.txt")).unwrap();
    let report = verify_fixtures(dir.path()).unwrap();
    assert!(!report.all_passed());
    assert!(report.render().contains("provenance"));
}

#[test]
fn wrong_expected_value_fails() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("overlap");
    copy_dir(&bundled_fixture_dir().join("overlap-published-et-en-ru"), &case);
    fs::write(case.join("expected/values.tsv"), "from_parent\t41.04\n").unwrap();
    let report = verify_fixtures(dir.path()).unwrap();
    assert!(!report.all_passed());
    let c = &report.fixtures[0].comparisons[0];
    assert_eq!(c.observed, Some(41.03));
    // an expected key the kind never produces is a failure, not a skip
    fs::write(case.join("expected/values.tsv"), "nonsense\t1\n").unwrap();
    assert!(!verify_fixtures(dir.path()).unwrap().all_passed());
}

#[test]
fn unknown_source_tag_fails() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("c");
    copy_dir(&bundled_fixture_dir().join("bleu-casing"), &case);
    fs::write(
        case.join("provenance.txt"),
        "kind: bleu\ntolerance: 0\nsource: folklore\n",
    )
    .unwrap();
    assert!(!verify_fixtures(dir.path()).unwrap().all_passed());
}
