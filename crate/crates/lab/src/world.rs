// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small synthetic world of facts: single-letter people who live in cities
//! and keep pets. It produces a training corpus and a matching edit suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::suite::{LocalityText, SuiteCase};

/// Cities with pairwise distinct first letters; the first letter is the
/// object token of every edit.
pub const CITIES: [&str; 24] = [
    "paris",
    "london",
    "tokyo",
    "berlin",
    "madrid",
    "oslo",
    "rome",
    "cairo",
    "dublin",
    "vienna",
    "kyoto",
    "accra",
    "nairobi",
    "quito",
    "hanoi",
    "seoul",
    "geneva",
    "jakarta",
    "zurich",
    "warsaw",
    "ulm",
    "istanbul",
    "frankfurt",
    "yerevan",
];

/// Capital letters that never open a template or filler word, so a name
/// occurs in text only as that person.
pub const NAMES: &str = "BCDFGHJKMNOPQRSUVWXYZ";

/// Generated corpus size; comfortably above 256 KiB.
pub const DEFAULT_CORPUS_BYTES: usize = 300_000;

const PETS: [&str; 8] = ["cat", "dog", "horse", "mouse", "parrot", "fox", "lamb", "bee"];

const NOUNS: [&str; 16] = [
    "the market",
    "the river",
    "a train",
    "the garden",
    "the old bridge",
    "a storm",
    "the museum",
    "the harbor",
    "the bakery",
    "a letter",
    "the school",
    "the forest",
    "a song",
    "the tower",
    "the road",
    "the library",
];
const VERBS: [&str; 10] = [
    "was busy",
    "looked calm",
    "opened early",
    "stayed quiet",
    "grew larger",
    "closed late",
    "felt warm",
    "seemed empty",
    "was loud",
    "moved slowly",
];
const TIMES: [&str; 8] =
    ["today", "at noon", "in spring", "last night", "on sunday", "after rain", "in winter", "this morning"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    pub name: char,
    pub city: String,
    pub pet: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub people: Vec<Person>,
}

impl FactWorld {
    /// One person per letter in [`NAMES`], each with a city and a pet drawn
    /// from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let people = NAMES
            .chars()
            .map(|name| Person {
                name,
                city: CITIES[rng.random_range(0..CITIES.len())].to_string(),
                pet: PETS[rng.random_range(0..PETS.len())].to_string(),
            })
            .collect();
        Self { seed, people }
    }

    fn fact_sentence(&self, p: &Person, rng: &mut ChaCha8Rng) -> String {
        let (n, c, a) = (p.name, &p.city, &p.pet);
        match rng.random_range(0..10) {
            0 | 1 => format!("{n} lives in {c}."),
            2 => format!("{n} is from {c}."),
            3 => format!("{n} owns a {a}."),
            4 | 5 => format!("The home of {n} is {c}."),
            6 => format!("Everyone knows {n} lives in {c}."),
            7 => format!("The pet of {n} is a {a}."),
            8 => format!("In {c} we met {n} and a {a}."),
            _ => format!("Later {n} went back to {c}."),
        }
    }

    fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let verb = VERBS[rng.random_range(0..VERBS.len())];
        let time = TIMES[rng.random_range(0..TIMES.len())];
        let mut s = format!("{noun} {verb} {time}.");
        s[..1].make_ascii_uppercase();
        s
    }

    /// Roughly `bytes` of text: about two fact sentences per filler sentence.
    pub fn corpus(&self, bytes: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::with_capacity(bytes + 64);
        while out.len() < bytes {
            let sentence = if rng.random_range(0..3) == 0 {
                Self::filler_sentence(&mut rng)
            } else {
                let p = &self.people[rng.random_range(0..self.people.len())];
                self.fact_sentence(p, &mut rng)
            };
            out.push_str(&sentence);
            out.push(if rng.random_range(0..6) == 0 { '\n' } else { ' ' });
        }
        out.truncate(bytes);
        out
    }

    fn other_city(&self, p: &Person, rng: &mut ChaCha8Rng) -> String {
        let mut choices: Vec<&str> =
            CITIES.iter().copied().filter(|c| c.as_bytes()[0] != p.city.as_bytes()[0]).collect();
        choices.shuffle(rng);
        choices[0].to_string()
    }

    /// Two cases per person: one whose prompt opens with the subject and one
    /// with the subject mid-sentence. Objects are first letters of cities.
    pub fn suite(&self, seed: u64, locality_probes: usize) -> Vec<SuiteCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = Vec::new();
        for p in &self.people {
            let new_city = self.other_city(p, &mut rng);
            let old = p.city[..1].to_string();
            let new = new_city[..1].to_string();
            let mut others: Vec<&Person> = self.people.iter().filter(|q| q.name != p.name).collect();
            others.shuffle(&mut rng);
            let locality = |template: &str| -> Vec<LocalityText> {
                others
                    .iter()
                    .take(locality_probes)
                    .map(|q| LocalityText {
                        prompt: template.replace("{}", &q.name.to_string()),
                        expected: q.city[..1].to_string(),
                    })
                    .collect()
            };
            cases.push(SuiteCase {
                id: format!("{}-first", p.name),
                subject: p.name.to_string(),
                prompt: "{} lives in ".into(),
                old_object: old.clone(),
                new_object: new.clone(),
                paraphrases: vec!["{} is from ".into(), "Everyone knows {} lives in ".into()],
                locality: locality("{} lives in "),
            });
            cases.push(SuiteCase {
                id: format!("{}-mid", p.name),
                subject: p.name.to_string(),
                prompt: "The home of {} is ".into(),
                old_object: old,
                new_object: new,
                paraphrases: vec!["Everyone knows {} lives in ".into(), "Later {} went back to ".into()],
                locality: locality("The home of {} is "),
            });
        }
        cases
    }
}
