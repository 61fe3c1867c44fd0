//! `key=value` campaign configuration files. Blank lines and `#` comments
//! are ignored.

use thiserror::Error;

use super::policy::Policy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
}

/// Every field is optional; unset fields keep the caller's defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileConfig {
    pub policy: Option<Policy>,
    pub reuse_limit: Option<u32>,
    pub min_packets_for_inc: Option<usize>,
    pub remirror_interval: Option<u32>,
    pub op_budget: Option<u64>,
    pub map_size: Option<usize>,
}

fn value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig, ConfigError> {
        let mut c = FileConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, v) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, v) = (key.trim(), v.trim());
            match key {
                "policy" => c.policy = Some(value(line, key, v)?),
                "reuse_limit" => c.reuse_limit = Some(value(line, key, v)?),
                "min_packets_for_inc" => c.min_packets_for_inc = Some(value(line, key, v)?),
                "remirror_interval" => c.remirror_interval = Some(value(line, key, v)?),
                "op_budget" => c.op_budget = Some(value(line, key, v)?),
                "map_size" => {
                    let n: usize = value(line, key, v)?;
                    if !n.is_power_of_two() || n < 128 {
                        return Err(ConfigError::Value {
                            line,
                            key: key.into(),
                            reason: "must be a power of two of at least 128".into(),
                        });
                    }
                    c.map_size = Some(n);
                }
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(c)
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &FileConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(policy, reuse_limit, min_packets_for_inc, remirror_interval, op_budget, map_size);
    }

    /// Renders every set field back as `key=value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push_str(&format!("{k}={v}\n"));
            }
        };
        put("policy", self.policy.map(|p| p.to_string()));
        put("reuse_limit", self.reuse_limit.map(|v| v.to_string()));
        put("min_packets_for_inc", self.min_packets_for_inc.map(|v| v.to_string()));
        put("remirror_interval", self.remirror_interval.map(|v| v.to_string()));
        put("op_budget", self.op_budget.map(|v| v.to_string()));
        put("map_size", self.map_size.map(|v| v.to_string()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let c = FileConfig::parse(
            "# campaign\npolicy = aggressive\nreuse_limit=20\nmin_packets_for_inc=5\nremirror_interval=100\nop_budget=5000\nmap_size=4096\n",
        )
        .unwrap();
        assert_eq!(c.policy, Some(Policy::Aggressive));
        assert_eq!(c.reuse_limit, Some(20));
        assert_eq!(c.min_packets_for_inc, Some(5));
        assert_eq!(c.remirror_interval, Some(100));
        assert_eq!(c.op_budget, Some(5000));
        assert_eq!(c.map_size, Some(4096));
        assert_eq!(FileConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(FileConfig::parse("policy=none\nbogus").unwrap_err(), ConfigError::Syntax { line: 2 });
        assert!(matches!(FileConfig::parse("colour=red"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(FileConfig::parse("map_size=1000"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(FileConfig::parse("policy=greedy"), Err(ConfigError::Value { line: 1, .. })));
    }

    #[test]
    fn overlay_prefers_set_fields() {
        let mut base = FileConfig::parse("policy=none\nreuse_limit=10").unwrap();
        base.overlay(&FileConfig::parse("reuse_limit=30").unwrap());
        assert_eq!(base.policy, Some(Policy::None));
        assert_eq!(base.reuse_limit, Some(30));
    }
}
