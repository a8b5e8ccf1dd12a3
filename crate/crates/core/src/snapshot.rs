//! Line-oriented tree snapshots: `digest | role | parent | tenant | revoked`,
//! one affiliated node per line, `-` for an absent field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::crypto::Digest;
use crate::sim::World;
use crate::tree::Role;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub digest: Digest,
    pub role: Role,
    pub parent: Option<Digest>,
    pub tenant: Digest,
    pub revoked: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub entries: Vec<Entry>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {what}")]
pub struct SnapshotError {
    pub line: usize,
    pub what: String,
}

fn opt(d: &Option<Digest>) -> String {
    d.map(|d| d.to_hex()).unwrap_or_else(|| "-".into())
}

impl Snapshot {
    /// Every affiliated node, in address order.
    pub fn of(w: &World) -> Snapshot {
        let entries = w
            .nodes
            .iter()
            .filter_map(|n| {
                let r = &n.record;
                Some(Entry {
                    digest: r.node_id,
                    role: r.role,
                    parent: r.parent.as_ref().map(|p| p.digest()),
                    tenant: r.tenant?.0,
                    revoked: r.revoked,
                })
            })
            .collect();
        Snapshot { entries }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{} | {} | {} | {} | {}", e.digest.to_hex(), e.role.as_str(), opt(&e.parent), e.tenant.to_hex(), u8::from(e.revoked));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Snapshot, SnapshotError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |what: &str| SnapshotError { line: line_no, what: what.to_string() };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(" | ").collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let digest = Digest::from_hex(f[0]).ok_or_else(|| err("bad digest"))?;
            let role = Role::parse(f[1]).ok_or_else(|| err("bad role"))?;
            let parent = match f[2] {
                "-" => None,
                h => Some(Digest::from_hex(h).ok_or_else(|| err("bad parent"))?),
            };
            let tenant = Digest::from_hex(f[3]).ok_or_else(|| err("bad tenant"))?;
            let revoked = match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(err("bad revoked flag")),
            };
            entries.push(Entry { digest, role, parent, tenant, revoked });
        }
        Ok(Snapshot { entries })
    }

    /// Indented forest per tenant. Revoked nodes are marked.
    pub fn dump_tree(&self) -> String {
        let mut kids: BTreeMap<Option<Digest>, Vec<&Entry>> = BTreeMap::new();
        for e in &self.entries {
            kids.entry(e.parent).or_default().push(e);
        }
        let mut s = String::new();
        fn walk(s: &mut String, e: &Entry, depth: usize, kids: &BTreeMap<Option<Digest>, Vec<&Entry>>, seen: &mut BTreeSet<Digest>) {
            if !seen.insert(e.digest) {
                return;
            }
            let mark = if e.revoked { " (revoked)" } else { "" };
            let _ = writeln!(s, "{}{} {}{mark}", "  ".repeat(depth), e.role.as_str(), e.digest.short());
            for k in kids.get(&Some(e.digest)).into_iter().flatten().filter(|k| k.tenant == e.tenant) {
                walk(s, k, depth + 1, kids, seen);
            }
        }
        let mut seen = BTreeSet::new();
        for root in kids.get(&None).into_iter().flatten() {
            let _ = writeln!(s, "tenant {}", root.tenant.short());
            walk(&mut s, root, 1, &kids, &mut seen);
        }
        let orphans: Vec<&Entry> = self.entries.iter().filter(|e| !seen.contains(&e.digest)).collect();
        if !orphans.is_empty() {
            let _ = writeln!(s, "unreachable");
            for e in orphans {
                let _ = writeln!(s, "  {} {}", e.role.as_str(), e.digest.short());
            }
        }
        s
    }

    /// Structural isolation check. Reports every edge or key that crosses a
    /// tenant boundary and every tenant that is not a single rooted tree.
    pub fn isolation_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut tenant_of: BTreeMap<Digest, BTreeSet<Digest>> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| !e.revoked) {
            tenant_of.entry(e.digest).or_default().insert(e.tenant);
        }
        for (d, ts) in &tenant_of {
            if ts.len() > 1 {
                out.push(format!("key {} is a member of {} tenants", d.short(), ts.len()));
            }
        }
        let by_tenant = self.entries.iter().fold(BTreeMap::<Digest, Vec<&Entry>>::new(), |mut m, e| {
            m.entry(e.tenant).or_default().push(e);
            m
        });
        for (t, es) in &by_tenant {
            let live: BTreeMap<Digest, &Entry> = es.iter().filter(|e| !e.revoked).map(|e| (e.digest, *e)).collect();
            let roots: Vec<_> = live.values().filter(|e| e.parent.is_none()).collect();
            if roots.len() != 1 {
                out.push(format!("tenant {} has {} roots", t.short(), roots.len()));
            }
            for e in live.values() {
                if let Some(p) = e.parent {
                    if !live.contains_key(&p) {
                        let foreign = self.entries.iter().any(|x| x.digest == p && x.tenant != *t);
                        let what = if foreign { "parent in another tenant" } else { "parent not a live member" };
                        out.push(format!("node {} of tenant {}: {what}", e.digest.short(), t.short()));
                    }
                }
                // walk up; a cycle never reaches a root
                let mut cur = e.parent;
                let mut steps = 0;
                while let Some(p) = cur {
                    steps += 1;
                    if steps > live.len() {
                        out.push(format!("node {} of tenant {}: parent cycle", e.digest.short(), t.short()));
                        break;
                    }
                    cur = live.get(&p).and_then(|x| x.parent);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(b: u8) -> Digest {
        Digest([b; 32])
    }

    fn e(dg: u8, role: Role, parent: Option<u8>, tenant: u8) -> Entry {
        Entry { digest: d(dg), role, parent: parent.map(d), tenant: d(tenant), revoked: false }
    }

    #[test]
    fn round_trip_and_errors() {
        let s = Snapshot { entries: vec![e(1, Role::Root, None, 9), e(2, Role::Leaf, Some(1), 9)] };
        assert_eq!(Snapshot::parse(&s.render()).unwrap(), s);
        let bad = s.render().replace(" | 0\n", " | 2\n");
        assert_eq!(Snapshot::parse(&bad).unwrap_err().line, 1);
        assert!(s.isolation_violations().is_empty());
        assert!(s.dump_tree().contains("  leaf 0202"));
    }

    #[test]
    fn cross_tenant_edge_and_shared_key() {
        let s = Snapshot {
            entries: vec![e(1, Role::Root, None, 9), e(2, Role::Root, None, 8), e(3, Role::Leaf, Some(2), 9), e(1, Role::Leaf, Some(2), 8)],
        };
        let v = s.isolation_violations();
        assert!(v.iter().any(|x| x.contains("member of 2 tenants")), "{v:?}");
        assert!(v.iter().any(|x| x.contains("parent in another tenant")), "{v:?}");
    }
}
