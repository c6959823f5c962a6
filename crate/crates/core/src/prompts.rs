//! Prompt templates, shipped as versioned text resources.

pub const PROMPT_VERSION: &str = "v1";

pub const QUERY_GEN_SYSTEM: &str = include_str!("../prompts/query_gen_system.v1.txt");
pub const QUERY_GEN_USER: &str = include_str!("../prompts/query_gen_user.v1.txt");
pub const FILE_CONTENT_SYSTEM: &str = include_str!("../prompts/file_content_system.v1.txt");
pub const FILE_CONTENT_USER: &str = include_str!("../prompts/file_content_user.v1.txt");
pub const FILE_CODE_SYSTEM: &str = include_str!("../prompts/file_code_system.v1.txt");
pub const FILE_CODE_USER: &str = include_str!("../prompts/file_code_user.v1.txt");
pub const FILTER_SYSTEM: &str = include_str!("../prompts/filter_system.v1.txt");
pub const FILTER_USER: &str = include_str!("../prompts/filter_user.v1.txt");
pub const VERIFIER_SYSTEM: &str = include_str!("../prompts/verifier_system.v1.txt");
pub const VERIFIER_USER: &str = include_str!("../prompts/verifier_user.v1.txt");
pub const CONTROLLER_SYSTEM: &str = include_str!("../prompts/controller_system.v1.txt");

/// Substitutes `{KEY}` placeholders. Other braces are left alone.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// "1,2,3,4, and 5" style enumeration of valid ids.
pub fn id_range(n: usize) -> String {
    match n {
        0 => String::new(),
        1 => "1".to_string(),
        _ => {
            let head: Vec<String> = (1..n).map(|i| i.to_string()).collect();
            format!("{}, and {n}", head.join(","))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_range_matches_five_way_wording() {
        assert_eq!(id_range(5), "1,2,3,4, and 5");
        assert_eq!(id_range(2), "1, and 2");
        assert_eq!(id_range(1), "1");
    }

    #[test]
    fn fill_leaves_json_braces() {
        let s = fill("{\n \"a\": {N}\n}", &[("N", "3")]);
        assert_eq!(s, "{\n \"a\": 3\n}");
    }
}
