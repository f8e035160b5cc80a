use std::fs;
use std::path::Path;

#[test]
fn every_chapter_is_listed_and_tested() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let summary = fs::read_to_string(root.join("../../book/src/SUMMARY.md")).unwrap();
    let lib = fs::read_to_string(root.join("src/lib.rs")).unwrap();
    for entry in fs::read_dir(root.join("../../book/src")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name == "SUMMARY.md" || !name.ends_with(".md") {
            continue;
        }
        assert!(summary.contains(&format!("({name})")), "{name} is not in SUMMARY.md");
        assert!(
            lib.contains(&format!("book/src/{name}\")")),
            "{name} is not included in book-tests"
        );
    }
}
