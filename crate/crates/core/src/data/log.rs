use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Dense item index; `0` is reserved for padding.
pub type ItemId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    /// Raw id from the source file.
    pub name: String,
    /// Chronological item sequence.
    pub items: Vec<ItemId>,
}

/// Per-user chronological sequences plus item→category metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionLog {
    pub users: Vec<UserHistory>,
    /// `item_names[id - 1]` is the raw id of dense item `id`.
    pub item_names: Vec<String>,
    /// Indexed by item id; entry 0 (padding) is always empty.
    pub categories: Vec<BTreeSet<usize>>,
    pub category_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub avg_length: f64,
    pub categories: usize,
}

impl InteractionLog {
    pub fn num_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let (u, i, n) = (self.num_users(), self.num_items(), self.num_interactions());
        DatasetStats {
            users: u,
            items: i,
            interactions: n,
            density: if u * i == 0 { 0.0 } else { n as f64 / (u * i) as f64 },
            avg_length: if u == 0 { 0.0 } else { n as f64 / u as f64 },
            categories: self.num_categories(),
        }
    }

    /// Writes `user \t item \t position` rows with raw ids.
    pub fn write_interactions(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for u in &self.users {
            for (t, &item) in u.items.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", u.name, self.item_names[item - 1], t));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes `item \t category` rows with raw ids.
    pub fn write_categories(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (item, cats) in self.categories.iter().enumerate().skip(1) {
            for &c in cats {
                writeln!(f, "{}\t{}", self.item_names[item - 1], self.category_names[c])
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Reads a tab-separated `user, item, timestamp` file (and optionally an
/// `item, category` file) into a densely indexed log.
///
/// Users and items are numbered by first appearance in the file; items start
/// at 1. Each user's interactions are stably sorted by timestamp.
pub fn load_interactions(path: &Path, categories_path: Option<&Path>) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut log = InteractionLog::default();
    let mut stamped: Vec<Vec<(f64, ItemId)>> = Vec::new();

    for (line, row) in data_lines(&text) {
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: shown,
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let ts: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            path: shown.clone(),
            line,
            msg: format!("bad timestamp {:?}", fields[2]),
        })?;
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                path: shown,
                line,
                msg: "empty user or item id".into(),
            });
        }
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            log.users.push(UserHistory {
                name: user.to_string(),
                items: Vec::new(),
            });
            stamped.push(Vec::new());
            log.users.len() - 1
        });
        let i = *item_index.entry(item.to_string()).or_insert_with(|| {
            log.item_names.push(item.to_string());
            log.item_names.len()
        });
        stamped[u].push((ts, i));
    }
    if log.users.is_empty() {
        return Err(Error::EmptyLog(format!(": {shown}")));
    }
    for (user, mut rows) in log.users.iter_mut().zip(stamped) {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        user.items = rows.into_iter().map(|(_, i)| i).collect();
    }

    log.categories = vec![BTreeSet::new(); log.item_names.len() + 1];
    if let Some(cpath) = categories_path {
        let ctext = fs::read_to_string(cpath).map_err(|e| Error::io(cpath, e))?;
        let cshown = cpath.display().to_string();
        let mut cat_index: HashMap<String, usize> = HashMap::new();
        for (line, row) in data_lines(&ctext) {
            let fields: Vec<&str> = row.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    path: cshown,
                    line,
                    msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            }
            let Some(&item) = item_index.get(fields[0].trim()) else {
                continue;
            };
            let cat = fields[1].trim().to_string();
            let c = *cat_index.entry(cat.clone()).or_insert_with(|| {
                log.category_names.push(cat);
                log.category_names.len() - 1
            });
            log.categories[item].insert(c);
        }
    }
    Ok(log)
}

/// Iteratively drops users with fewer than `k` interactions and items with
/// fewer than `k` occurrences until nothing changes, then re-densifies ids.
pub fn filter_min_interactions(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::config("filter threshold must be at least 1"));
    }
    let mut users: Vec<UserHistory> = log.users.clone();
    loop {
        let mut counts = vec![0usize; log.num_items() + 1];
        for u in &users {
            for &i in &u.items {
                counts[i] += 1;
            }
        }
        let before: usize = users.iter().map(|u| u.items.len()).sum::<usize>() + users.len();
        for u in &mut users {
            u.items.retain(|&i| counts[i] >= k);
        }
        users.retain(|u| u.items.len() >= k);
        let after: usize = users.iter().map(|u| u.items.len()).sum::<usize>() + users.len();
        if after == before {
            break;
        }
    }
    if users.is_empty() {
        return Err(Error::EmptyLog(format!(" after filtering at k={k}")));
    }
    Ok(reindex(log, users))
}

/// Renumbers items still referenced by `users` as 1.. in old-id order, and
/// categories still referenced as 0.. in old-id order.
fn reindex(log: &InteractionLog, mut users: Vec<UserHistory>) -> InteractionLog {
    let mut used = vec![false; log.num_items() + 1];
    for u in &users {
        for &i in &u.items {
            used[i] = true;
        }
    }
    let mut remap = vec![0usize; log.num_items() + 1];
    let mut item_names = Vec::new();
    let mut categories = vec![BTreeSet::new()];
    for old in 1..=log.num_items() {
        if used[old] {
            item_names.push(log.item_names[old - 1].clone());
            remap[old] = item_names.len();
            categories.push(log.categories.get(old).cloned().unwrap_or_default());
        }
    }
    for u in &mut users {
        for i in &mut u.items {
            *i = remap[*i];
        }
    }
    let mut cat_used = vec![false; log.num_categories()];
    for cats in &categories {
        for &c in cats {
            cat_used[c] = true;
        }
    }
    let mut cat_remap = vec![0usize; log.num_categories()];
    let mut category_names = Vec::new();
    for (old, name) in log.category_names.iter().enumerate() {
        if cat_used[old] {
            cat_remap[old] = category_names.len();
            category_names.push(name.clone());
        }
    }
    for cats in &mut categories {
        *cats = cats.iter().map(|&c| cat_remap[c]).collect();
    }
    InteractionLog {
        users,
        item_names,
        categories,
        category_names,
    }
}
