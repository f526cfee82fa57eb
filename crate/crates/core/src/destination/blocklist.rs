//! Domain blocklists in hosts or plain-domain format.

use std::collections::BTreeSet;
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DestinationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListFormat {
    /// `0.0.0.0 domain [domain ...]`
    Hosts,
    /// One domain per line.
    Domains,
}

impl FromStr for ListFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hosts" => Ok(ListFormat::Hosts),
            "domains" => Ok(ListFormat::Domains),
            other => Err(format!("unknown blocklist format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocklist {
    pub name: String,
    pub format: ListFormat,
    pub entries: BTreeSet<String>,
}

const HOSTS_NOISE: &[&str] = &[
    "localhost",
    "localhost.localdomain",
    "local",
    "broadcasthost",
    "ip6-localhost",
    "ip6-loopback",
    "0.0.0.0",
];

impl Blocklist {
    /// Parses list text. With `format = None` the format is inferred from
    /// the first entry line.
    pub fn parse(name: &str, text: &str, format: Option<ListFormat>) -> Self {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect();
        let format = format.unwrap_or_else(|| {
            let first = lines.first().and_then(|l| l.split_whitespace().next());
            match first.map(|t| t.parse::<IpAddr>().is_ok()) {
                Some(true) => ListFormat::Hosts,
                _ => ListFormat::Domains,
            }
        });
        let mut entries = BTreeSet::new();
        for line in lines {
            let mut fields = line.split_whitespace();
            let domains: Vec<&str> = match format {
                ListFormat::Hosts => {
                    if fields.next().and_then(|ip| ip.parse::<IpAddr>().ok()).is_none() {
                        continue;
                    }
                    fields.collect()
                }
                ListFormat::Domains => fields.take(1).collect(),
            };
            for d in domains {
                let d = d.trim_end_matches('.').to_ascii_lowercase();
                if !d.is_empty() && !HOSTS_NOISE.contains(&d.as_str()) {
                    entries.insert(d);
                }
            }
        }
        Blocklist {
            name: name.to_string(),
            format,
            entries,
        }
    }

    pub fn load(name: &str, path: &Path, format: Option<ListFormat>) -> Result<Self, DestinationError> {
        let text = std::fs::read_to_string(path).map_err(|source| DestinationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(name, &text, format))
    }

    pub fn contains(&self, domain: &str) -> bool {
        self.entries.contains(domain)
    }
}

/// Candidate domains from `fqdn` up to and including `esld`.
pub fn parent_walk<'a>(fqdn: &'a str, esld: &str) -> Vec<&'a str> {
    let mut out = vec![fqdn];
    if fqdn.parse::<IpAddr>().is_ok() {
        return out;
    }
    let mut cur = fqdn;
    while cur != esld && cur.len() > esld.len() {
        match cur.split_once('.') {
            Some((_, rest)) => {
                cur = rest;
                out.push(cur);
            }
            None => break,
        }
    }
    out
}

/// Whether `fqdn` or a parent down to `esld` appears in any list; returns
/// the matching list names in list order.
pub fn match_ats(fqdn: &str, esld: &str, lists: &[Blocklist]) -> (bool, Vec<String>) {
    let candidates = parent_walk(fqdn, esld);
    let names: Vec<String> = lists
        .iter()
        .filter(|l| candidates.iter().any(|c| l.contains(c)))
        .map(|l| l.name.clone())
        .collect();
    (!names.is_empty(), names)
}
