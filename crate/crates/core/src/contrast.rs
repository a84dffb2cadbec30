//! A scripted 20-question world in which self-consistency and causal
//! selection disagree.
//!
//! Every question asks who founded a band. On the designed questions 20 of
//! the 30 sampled CoTs follow a memorized, knowledge-free story that names a
//! wrong founder and never changes under counterfactual knowledge; the other
//! 10 read the passage, answer correctly and follow the counterfactual founder
//! when it is substituted. On the control questions all CoTs read the passage.
//! The two reasoning styles use disjoint vocabularies so that the similarity
//! gate separates them under the hashed bag-of-words encoder.

use serde::{Deserialize, Serialize};

use crate::eval::{QueryRecord, RecordMeta};
use crate::gateway::ScriptedFixture;
use crate::pipeline::variant_key;
use crate::prompts;

pub const QUESTIONS: usize = 20;
pub const DESIGNED: usize = 16;
pub const COTS: usize = 30;
pub const BIASED_COTS: usize = 20;
pub const ENTITIES: usize = 5;
pub const VARIANT_COTS: usize = 5;
/// Biased CoTs among the `VARIANT_COTS` sampled under each variant.
pub const BIASED_VARIANT_COTS: usize = 3;

const FIRST: [&str; 20] = [
    "Corvin", "Maren", "Talis", "Oden", "Brynja", "Elsabet", "Ivor", "Lorne", "Petra", "Sable", "Tamsin", "Ulric",
    "Vesna", "Wrenna", "Yara", "Zeno", "Aldous", "Brisa", "Cato", "Darra",
];
const LAST: [&str; 20] = [
    "Halloway",
    "Vossberg",
    "Marlowe",
    "Quillon",
    "Ashcombe",
    "Thornquist",
    "Kestrelle",
    "Fenwright",
    "Rookham",
    "Sorrelby",
    "Dunmere",
    "Larkspur",
    "Pennock",
    "Whitlaw",
    "Ostrander",
    "Brantley",
    "Calloway",
    "Everhart",
    "Gallant",
    "Hollis",
];
const ADJ: [&str; 20] = [
    "Glass", "Velvet", "Iron", "Paper", "Silver", "Crimson", "Hollow", "Electric", "Quiet", "Amber", "Copper", "Neon",
    "Marble", "Static", "Golden", "Violet", "Broken", "Lunar", "Distant", "Frozen",
];
const NOUN: [&str; 20] = [
    "Orchard",
    "Lanterns",
    "Harbor",
    "Comets",
    "Meadow",
    "Engines",
    "Tides",
    "Cathedral",
    "Ravens",
    "Satellites",
    "Gardens",
    "Prophets",
    "Rivers",
    "Mirrors",
    "Towers",
    "Wolves",
    "Pilots",
    "Echoes",
    "Kingdom",
    "Signals",
];
const CITY: [&str; 20] = [
    "Lisbon", "Bergen", "Tallinn", "Porto", "Ghent", "Krakow", "Utrecht", "Graz", "Turku", "Bilbao", "Leipzig", "Cork",
    "Basel", "Aarhus", "Lyon", "Brno", "Split", "Malmo", "Seville", "Riga",
];
const LABEL: [&str; 20] = [
    "Northlight",
    "Blueprint",
    "Foxglove",
    "Harrow",
    "Meridian",
    "Saltmarsh",
    "Kingfisher",
    "Larchwood",
    "Driftwood",
    "Ember",
    "Moonstone",
    "Pinecrest",
    "Redwing",
    "Stonebridge",
    "Thistle",
    "Wavecrest",
    "Ashgrove",
    "Bramble",
    "Cinder",
    "Dovetail",
];

/// One question of the world with all its surface strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastQuestion {
    pub id: String,
    pub designed: bool,
    pub founder: String,
    pub band: String,
    pub city: String,
    pub studio_city: String,
    pub label: String,
    /// Founder named by the memorized story.
    pub biased_answer: String,
    /// Counterfactual surfaces, index-aligned with `entities()`.
    pub counterfactuals: [String; ENTITIES],
}

impl ContrastQuestion {
    fn new(i: usize) -> Self {
        let j = |k: usize| (i + k) % 20;
        let founder = format!("{} {}", FIRST[i], LAST[i]);
        ContrastQuestion {
            id: format!("cq{i:02}"),
            designed: i < DESIGNED,
            band: format!("{} {}", ADJ[i], NOUN[i]),
            city: CITY[i].to_string(),
            studio_city: CITY[j(10)].to_string(),
            label: format!("{} Records", LABEL[i]),
            biased_answer: format!("{} {}", FIRST[j(7)], LAST[j(13)]),
            counterfactuals: [
                format!("{} {}", FIRST[j(3)], LAST[j(5)]),
                format!("{} {}", ADJ[j(4)], NOUN[j(9)]),
                CITY[j(5)].to_string(),
                CITY[j(15)].to_string(),
                format!("{} Records", LABEL[j(6)]),
            ],
            founder,
        }
    }

    pub fn entities(&self) -> [&str; ENTITIES] {
        [&self.founder, &self.band, &self.city, &self.studio_city, &self.label]
    }

    pub fn question(&self) -> String {
        format!("Who founded the band {}?", self.band)
    }

    pub fn context(&self) -> Vec<String> {
        vec![
            format!("{} founded the band {} in {}.", self.founder, self.band, self.city),
            format!("The band signed with {} after two years of touring.", self.label),
            format!("{} recorded their debut album in {}.", self.band, self.studio_city),
            "Critics praised the album for its layered guitars.".to_string(),
        ]
    }

    pub fn record(&self) -> QueryRecord {
        QueryRecord {
            id: self.id.clone(),
            question: self.question(),
            context: self.context(),
            answers: vec![self.founder.clone()],
            metadata: RecordMeta {
                source: "contrast".into(),
                ..Default::default()
            },
        }
    }
}

/// CoT that reads the passage. `founder` and `band` are the surfaces visible
/// in the knowledge the CoT was sampled under.
pub fn grounded_cot(founder: &str, band: &str, k: usize) -> String {
    format!(
        "Reading the provided passage carefully, the opening sentence explicitly states who \
         established {band}. Checking each sentence of the supplied text confirms that this \
         founding claim is directly supported by the given evidence, draft {k}. So the answer is {founder}."
    )
}

/// CoT that ignores the passage and recites a memorized story.
pub fn biased_cot(wrong: &str, k: usize) -> String {
    format!(
        "From memory, popular legend always recounts how a famous musician started that group \
         long ago; widely repeated interviews and fan folklore celebrate this origin story, \
         recollection {k}. So the answer is {wrong}."
    )
}

/// Order of the 30 base CoTs: every third sample is grounded.
fn is_grounded_sample(designed: bool, k: usize) -> bool {
    !designed || k % 3 == 2
}

/// The dataset, the scripted fixture and the ids of the designed questions.
pub fn contrast_world() -> (Vec<QueryRecord>, ScriptedFixture, Vec<String>) {
    let mut records = Vec::new();
    let mut fixture = ScriptedFixture::default();
    let mut designed = Vec::new();
    for i in 0..QUESTIONS {
        let q = ContrastQuestion::new(i);
        records.push(q.record());
        if q.designed {
            designed.push(q.id.clone());
        }
        let ents = q.entities();
        let weights = [0.9, 0.7, 0.5, 0.3, 0.2];
        let listing: Vec<String> = ents.iter().zip(weights).map(|(e, w)| format!("{e} | {w}")).collect();
        fixture.push(prompts::EXTRACT_ENTITIES, &q.id, None, listing.join("\n"));
        let cfs: Vec<String> = ents
            .iter()
            .zip(&q.counterfactuals)
            .map(|(e, c)| format!("{e} -> {c}"))
            .collect();
        fixture.push(prompts::COUNTERFACTUAL, &q.id, None, cfs.join("\n"));

        for k in 0..COTS {
            let text = if is_grounded_sample(q.designed, k) {
                grounded_cot(&q.founder, &q.band, k)
            } else {
                biased_cot(&q.biased_answer, k)
            };
            fixture.push(prompts::COT, &q.id, Some(k as u32), text);
        }
        let icl = if q.designed { &q.biased_answer } else { &q.founder };
        fixture.push(prompts::ICL, &q.id, None, format!("The answer is {icl}."));

        // Variant t keeps entity t and substitutes all the others.
        for t in 1..=ENTITIES {
            let founder = if t == 1 { &q.founder } else { &q.counterfactuals[0] };
            let band = if t == 2 { &q.band } else { &q.counterfactuals[1] };
            for p in 0..VARIANT_COTS {
                let text = if q.designed && p < BIASED_VARIANT_COTS {
                    biased_cot(&q.biased_answer, 100 + p)
                } else {
                    grounded_cot(founder, band, 100 + p)
                };
                fixture.push(prompts::COT, &variant_key(&q.id, t), Some(p as u32), text);
            }
        }
    }
    (records, fixture, designed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::cot::cosine;
    use crate::eval::normalize_answer;
    use crate::gateway::{Gateway, HashedBowEncoder};
    use crate::pipeline::{run_dataset, Method};

    #[test]
    fn styles_are_separated_by_the_gate() {
        let e = HashedBowEncoder::default();
        let q = ContrastQuestion::new(3);
        let g = e.encode(&grounded_cot(&q.founder, &q.band, 2));
        let g_cf = e.encode(&grounded_cot(&q.counterfactuals[0], &q.counterfactuals[1], 101));
        let b = e.encode(&biased_cot(&q.biased_answer, 0));
        let b_cf = e.encode(&biased_cot(&q.biased_answer, 100));
        assert!(cosine(&g, &g_cf).unwrap() >= 0.8);
        assert!(cosine(&b, &b_cf).unwrap() >= 0.8);
        assert!(cosine(&g, &b_cf).unwrap() < 0.8);
        assert!(cosine(&b, &g_cf).unwrap() < 0.8);
    }

    #[test]
    fn surfaces_are_distinct() {
        for i in 0..QUESTIONS {
            let q = ContrastQuestion::new(i);
            let knowledge = q.context().join(" ");
            assert!(!knowledge.contains(&q.biased_answer));
            for (e, c) in q.entities().iter().zip(&q.counterfactuals) {
                assert_ne!(e, c);
                assert!(knowledge.contains(e));
            }
        }
    }

    #[test]
    fn cfd_and_majority_disagree_on_designed_questions() {
        let (records, fixture, designed) = contrast_world();
        let gw = Gateway::scripted(fixture, 4);
        let cfg = PipelineConfig::default();
        let cfd = run_dataset(&gw, &cfg, Method::Cfd, &records).unwrap();
        assert!(cfd.failures.is_empty(), "{:?}", cfd.failures);
        for (r, p) in records.iter().zip(&cfd.predictions) {
            assert_eq!(p.prediction, normalize_answer(&r.answers[0]), "{}", r.id);
        }
        let sc = run_dataset(&gw, &cfg, Method::CotSc, &records).unwrap();
        for (r, p) in records.iter().zip(&sc.predictions) {
            let correct = p.prediction == normalize_answer(&r.answers[0]);
            assert_eq!(correct, !designed.contains(&r.id), "{}", r.id);
        }
    }
}
