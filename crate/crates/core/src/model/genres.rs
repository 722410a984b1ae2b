use std::fmt;

use serde::{Deserialize, Serialize};

pub const NUM_GENRES: usize = 21;

/// The 21 genre labels, in output order.
pub const GENRES: [&str; NUM_GENRES] = [
    "Action",
    "Adventure",
    "Animation",
    "Biography",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Family",
    "Fantasy",
    "History",
    "Horror",
    "Music",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Sport",
    "Thriller",
    "War",
    "Western",
];

/// Case-sensitive lookup of a genre name.
pub fn genre_index(name: &str) -> Option<usize> {
    GENRES.iter().position(|&g| g == name)
}

pub fn vocabulary() -> Vec<String> {
    GENRES.iter().map(|s| s.to_string()).collect()
}

/// A set of genres, one bit per vocabulary index.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenreSet(u32);

impl GenreSet {
    pub fn empty() -> Self {
        GenreSet(0)
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = GenreSet(0);
        for i in indices {
            s.insert(i);
        }
        s
    }

    pub fn insert(&mut self, index: usize) {
        assert!(index < NUM_GENRES, "genre index {index} out of range");
        self.0 |= 1 << index;
    }

    pub fn contains(&self, index: usize) -> bool {
        index < NUM_GENRES && self.0 & (1 << index) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_GENRES).filter(|&i| self.contains(i))
    }

    pub fn names(&self) -> Vec<String> {
        self.iter().map(|i| GENRES[i].to_string()).collect()
    }

    pub fn one_hot(&self) -> [f32; NUM_GENRES] {
        let mut out = [0.0; NUM_GENRES];
        for i in self.iter() {
            out[i] = 1.0;
        }
        out
    }
}

impl fmt::Debug for GenreSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|i| GENRES[i])).finish()
    }
}
