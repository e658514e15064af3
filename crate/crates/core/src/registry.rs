//! Name-keyed collections of interchangeable strategies.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Strategies of one kind behind a common trait, selected by name.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    items: BTreeMap<String, Box<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            items: BTreeMap::new(),
        }
    }

    /// Adds a strategy, replacing any previous one of the same name.
    pub fn register(&mut self, name: impl Into<String>, item: Box<T>) {
        self.items.insert(name.into(), item);
    }

    pub fn names(&self) -> Vec<&str> {
        self.items.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.items.get(name).map(|b| b.as_ref()).ok_or_else(|| Error::Unknown {
            kind: self.kind,
            name: name.into(),
            available: self.names().join(", "),
        })
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}
