//! Tuple numbering: stable ids for analysis-created entities.
//!
//! A rule like `wrap(x, n) :- stmt(x), n = new wrapper(x)` mints an id for
//! every distinct `(ctor, args)` key. The pool makes that minting
//! *idempotent and persistent*: the same key receives the same id within a
//! pool, after a dump/load round trip, and across commits that share the
//! pool file. Two runs that do **not** share a pool agree only up to a
//! bijection on fresh ids — that is the equivalence the harness checks.
//!
//! Fresh ids live in their own namespace: they always have the top bit set
//! ([`FRESH_ID_BIT`]), while ids minted by the extractor for syntax-tree
//! nodes always have it clear. Collisions between the two are structurally
//! impossible.
//!
//! The pool never evicts entries. For long pool lineages it grows without
//! bound; that is an accepted cost here (a real deployment would need
//! eviction tied to key liveness).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::sync::Arc;

use crate::value::{Value, FRESH_ID_BIT};

/// Defensive: the pool ran out of the 2^63-id namespace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("fresh-id pool exhausted")]
pub struct PoolExhausted;

/// A persisted pool file was malformed.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad pool header: expected `IDPOOL` magic")]
    BadMagic,
    #[error("unsupported pool format version {0}")]
    BadVersion(u16),
    #[error("truncated pool file: {0}")]
    Truncated(String),
    #[error("corrupt pool record: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const MAGIC: &[u8; 6] = b"IDPOOL";
const VERSION: u16 = 1;

/// The key of a minted id: constructor name plus ground argument values.
pub type PoolKey = (String, Vec<Value>);

/// Persistable mapping `(ctor, args) -> fresh id`.
///
/// Ids are assigned sequentially from `FRESH_ID_BIT` upward, so every id
/// has the top bit set and the pool is injective by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdPool {
    forward: BTreeMap<PoolKey, u64>,
    reverse: BTreeMap<u64, PoolKey>,
    next: u64,
}

impl IdPool {
    pub fn new() -> IdPool {
        IdPool { forward: BTreeMap::new(), reverse: BTreeMap::new(), next: 0 }
    }

    /// Returns the id for `(ctor, args)`, minting a fresh one on first use.
    /// Idempotent: the same key always yields the same id within a pool
    /// lineage (including across [`IdPool::dump`]/[`IdPool::load`]).
    pub fn number_tuple(&mut self, ctor: &str, args: &[Value]) -> Result<u64, PoolExhausted> {
        let key = (ctor.to_owned(), args.to_vec());
        if let Some(&id) = self.forward.get(&key) {
            return Ok(id);
        }
        if self.next >= FRESH_ID_BIT {
            return Err(PoolExhausted);
        }
        let id = FRESH_ID_BIT | self.next;
        self.next += 1;
        self.forward.insert(key.clone(), id);
        self.reverse.insert(id, key);
        Ok(id)
    }

    /// The id already minted for a key, if any. Never mints.
    pub fn lookup(&self, ctor: &str, args: &[Value]) -> Option<u64> {
        self.forward.get(&(ctor.to_owned(), args.to_vec())).copied()
    }

    /// The key behind a minted id — the inverse of [`IdPool::number_tuple`].
    pub fn decode(&self, id: u64) -> Option<(&str, &[Value])> {
        self.reverse.get(&id).map(|(c, a)| (c.as_str(), a.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PoolKey, u64)> {
        self.forward.iter().map(|(k, &v)| (k, v))
    }

    /// Serializes the pool: versioned header, then length-prefixed binary
    /// records `(ctor, args, id)`.
    pub fn dump(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.forward.len() as u64).to_le_bytes())?;
        for ((ctor, args), id) in &self.forward {
            w.write_all(&(ctor.len() as u32).to_le_bytes())?;
            w.write_all(ctor.as_bytes())?;
            w.write_all(&(args.len() as u32).to_le_bytes())?;
            for v in args {
                match v {
                    Value::Id(n) => {
                        w.write_all(&[0u8])?;
                        w.write_all(&n.to_le_bytes())?;
                    }
                    Value::Int(n) => {
                        w.write_all(&[1u8])?;
                        w.write_all(&n.to_le_bytes())?;
                    }
                    Value::Str(s) => {
                        w.write_all(&[2u8])?;
                        w.write_all(&(s.len() as u32).to_le_bytes())?;
                        w.write_all(s.as_bytes())?;
                    }
                }
            }
            w.write_all(&id.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses a pool produced by [`IdPool::dump`]. `load(dump(p)) == p`.
    pub fn load(r: &mut impl Read) -> Result<IdPool, FormatError> {
        fn bytes<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N], FormatError> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|_| FormatError::Truncated(what.to_owned()))?;
            Ok(buf)
        }
        fn string(r: &mut impl Read, what: &str) -> Result<String, FormatError> {
            let len = u32::from_le_bytes(bytes(r, what)?) as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|_| FormatError::Truncated(what.to_owned()))?;
            String::from_utf8(buf)
                .map_err(|_| FormatError::Corrupt(format!("{what} is not UTF-8")))
        }

        let magic: [u8; 6] = bytes(r, "header")?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = u16::from_le_bytes(bytes(r, "version")?);
        if version != VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let count = u64::from_le_bytes(bytes(r, "entry count")?);

        let mut pool = IdPool::new();
        for i in 0..count {
            let what = format!("record {i}");
            let ctor = string(r, &what)?;
            let argc = u32::from_le_bytes(bytes(r, &what)?) as usize;
            let mut args = Vec::with_capacity(argc);
            for _ in 0..argc {
                let [tag] = bytes(r, &what)?;
                args.push(match tag {
                    0 => Value::Id(u64::from_le_bytes(bytes(r, &what)?)),
                    1 => Value::Int(i64::from_le_bytes(bytes(r, &what)?)),
                    2 => Value::Str(Arc::from(string(r, &what)?)),
                    t => {
                        return Err(FormatError::Corrupt(format!(
                            "{what}: unknown value tag {t}"
                        )))
                    }
                });
            }
            let id = u64::from_le_bytes(bytes(r, &what)?);
            if id & FRESH_ID_BIT == 0 {
                return Err(FormatError::Corrupt(format!(
                    "{what}: id {id:#x} lacks the fresh-id bit"
                )));
            }
            let key = (ctor, args);
            if pool.reverse.insert(id, key.clone()).is_some() {
                return Err(FormatError::Corrupt(format!("{what}: duplicate id {id:#x}")));
            }
            if pool.forward.insert(key, id).is_some() {
                return Err(FormatError::Corrupt(format!("{what}: duplicate key")));
            }
            pool.next = pool.next.max((id & !FRESH_ID_BIT) + 1);
        }
        // A trailing byte means the writer and reader disagree on layout.
        let mut rest = [0u8; 1];
        match r.read(&mut rest) {
            Ok(0) => Ok(pool),
            Ok(_) => Err(FormatError::Corrupt("trailing bytes after final record".into())),
            Err(e) => Err(FormatError::Io(e)),
        }
    }
}

impl fmt::Display for IdPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pool with {} ids", self.forward.len())?;
        for ((ctor, args), id) in &self.forward {
            let rendered: Vec<String> = args.iter().map(|v| v.to_string()).collect();
            writeln!(f, "  {ctor}({}) -> #{id}", rendered.join(", "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(n: i64) -> Value {
        Value::Int(n)
    }

    #[test]
    fn numbering_is_idempotent_and_injective() {
        let mut pool = IdPool::new();
        let a = pool.number_tuple("wrapper", &[v(1), v(2)]).unwrap();
        let b = pool.number_tuple("wrapper", &[v(1), v(2)]).unwrap();
        let c = pool.number_tuple("wrapper", &[v(2), v(1)]).unwrap();
        let d = pool.number_tuple("other", &[v(1), v(2)]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(c, d);
        assert_eq!(pool.len(), 3);
    }

    #[test]
    fn fresh_ids_live_in_the_high_namespace() {
        let mut pool = IdPool::new();
        let id = pool.number_tuple("w", &[]).unwrap();
        assert_ne!(id & FRESH_ID_BIT, 0);
        assert_eq!(pool.decode(id), Some(("w", &[][..])));
        assert_eq!(pool.lookup("w", &[]), Some(id));
        assert_eq!(pool.lookup("w", &[v(9)]), None);
    }

    #[test]
    fn empty_pool_round_trips() {
        let mut bytes = Vec::new();
        IdPool::new().dump(&mut bytes).unwrap();
        let loaded = IdPool::load(&mut bytes.as_slice()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded, IdPool::new());
    }

    #[test]
    fn reloaded_pool_renumbers_identically() {
        let mut pool = IdPool::new();
        let id = pool.number_tuple("box", &[Value::Str("hello".into()), v(3)]).unwrap();
        let mut bytes = Vec::new();
        pool.dump(&mut bytes).unwrap();

        let mut reloaded = IdPool::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(reloaded, pool);
        let again = reloaded.number_tuple("box", &[Value::Str("hello".into()), v(3)]).unwrap();
        assert_eq!(again, id);
        // New keys continue after the persisted ones.
        let fresh = reloaded.number_tuple("box", &[v(4)]).unwrap();
        assert!(fresh > id);
    }

    #[test]
    fn truncated_files_are_rejected() {
        let mut pool = IdPool::new();
        pool.number_tuple("w", &[v(1), Value::Id(7), Value::Str("s".into())]).unwrap();
        let mut bytes = Vec::new();
        pool.dump(&mut bytes).unwrap();
        for cut in [0, 3, 8, bytes.len() - 1] {
            let err = IdPool::load(&mut &bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, FormatError::Truncated(_) | FormatError::BadMagic),
                "cut at {cut}: {err:?}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            IdPool::load(&mut extra.as_slice()).unwrap_err(),
            FormatError::Corrupt(_)
        ));
    }

    #[test]
    fn random_pools_round_trip() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut pool = IdPool::new();
        for _ in 0..1000 {
            let ctor = format!("c{}", rng.random_range(0..20));
            let args: Vec<Value> = (0..rng.random_range(0..4))
                .map(|_| match rng.random_range(0..3) {
                    0 => Value::Id(rng.random()),
                    1 => Value::Int(rng.random_range(-1000..1000)),
                    _ => Value::Str(format!("s{}", rng.random_range(0..50)).into()),
                })
                .collect();
            pool.number_tuple(&ctor, &args).unwrap();
        }
        let mut bytes = Vec::new();
        pool.dump(&mut bytes).unwrap();
        let loaded = IdPool::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded, pool);
    }
}
