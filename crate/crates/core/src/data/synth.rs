//! Templated generator for short synthetic clinical notes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::{Label, NoteRecord, Origin};
use super::terms::{Term, TermList};
use super::vocab::{split_words, tokenize_words};

/// Terms kept out of every training split, used to probe generalization.
pub const HOLDOUT_TERMS: [&str; 8] = [
    "Wilms",
    "Pancoast",
    "Sezary",
    "Retinoblastoma",
    "Hepatoblastoma",
    "Mycosis fungoides",
    "Ependymoma",
    "Osteosarcoma",
];

const SITES: [&str; 14] = [
    "breast",
    "lung",
    "colon",
    "bowel",
    "prostate",
    "ovarian",
    "pancreatic",
    "bladder",
    "skin",
    "liver",
    "gastric",
    "renal",
    "oesophageal",
    "rectal",
];

/// Terms that read naturally with an anatomical site.
const SITED: [&str; 12] = [
    "cancer",
    "carcinoma",
    "tumour",
    "tumor",
    "adenocarcinoma",
    "sarcoma",
    "malignancy",
    "scc",
    "ca",
    "metastases",
    "mets",
    "met",
];

const ADJECTIVES: [&str; 2] = ["metastatic", "malignant"];
const ADJ_NOUNS: [&str; 5] = ["disease", "lesion", "deposits", "process", "mass"];

/// Non-cancer conditions, including site words shared with cancer notes
/// and benign "-oma" lesions.
const CONDITIONS: [&str; 58] = [
    "diabetes",
    "type 2 diabetes",
    "t2dm",
    "hypertension",
    "htn",
    "asthma",
    "copd",
    "ckd stage 3",
    "chronic kidney disease",
    "heart failure",
    "af",
    "atrial fibrillation",
    "ihd",
    "angina",
    "obesity",
    "hypothyroidism",
    "dementia",
    "epilepsy",
    "depression",
    "anxiety",
    "osteoarthritis",
    "rheumatoid arthritis",
    "gout",
    "stroke",
    "tia",
    "anaemia",
    "pneumonia",
    "uti",
    "cellulitis",
    "breast abscess",
    "breast cyst",
    "mastitis",
    "lung fibrosis",
    "lung infection",
    "collapsed lung",
    "benign prostatic hyperplasia",
    "prostatitis",
    "lipoma",
    "fibroadenoma",
    "glaucoma",
    "haematoma",
    "atheroma",
    "xanthoma",
    "granuloma",
    "liver cirrhosis",
    "fatty liver",
    "bowel obstruction",
    "ulcerative colitis",
    "crohns disease",
    "gallstones",
    "skin rash",
    "eczema",
    "psoriasis",
    "bladder infection",
    "gastric ulcer",
    "renal stones",
    "pancreatitis",
    "serum ca low",
];

const CLINICS: [&str; 9] = [
    "respiratory",
    "cardiology",
    "renal",
    "diabetes",
    "rheumatology",
    "gastro",
    "neurology",
    "dermatology",
    "urology",
];

/// Frames shared by both classes; `{}` is the condition phrase.
const FRAMES: [&str; 20] = [
    "{}",
    "known {}",
    "k/c {}",
    "hx of {}",
    "pmh: {}",
    "history of {}",
    "diagnosed with {}",
    "diagnosed with {} in {year}",
    "{} diagnosed {year}",
    "background of {}, {other}",
    "{other}, {}",
    "{}; {other}",
    "{} - under follow up",
    "recent {}",
    "{}, on treatment",
    "{} stable",
    "ongoing {}",
    "previous {}",
    "comorbidities: {other}, {}",
    "{} ({year})",
];

/// Notes without any condition.
const PLAIN: [&str; 10] = [
    "no past medical history",
    "nil significant pmh",
    "all well, no concerns",
    "no known comorbidities",
    "nkda, no pmh",
    "fit and well",
    "denies chest pain",
    "no fever today",
    "not diabetic, no htn",
    "independent, lives alone",
];

/// Pretraining contexts specific to cancer terms.
const CANCER_CONTEXTS: [&str; 12] = [
    "referred to oncology with {}",
    "{} treated with chemotherapy",
    "staging ct for {}",
    "biopsy confirmed {}",
    "radiotherapy for {}",
    "palliative care input for {}",
    "{} under oncology follow up",
    "mdt discussion of {}",
    "{} with spread to the {site}",
    "haematology review for {}",
    "{} in remission after chemo",
    "new diagnosis of {}, oncology aware",
];

/// Pretraining contexts specific to other conditions.
const OTHER_CONTEXTS: [&str; 8] = [
    "referred to {clinic} with {}",
    "{} managed by gp",
    "{} on regular tablets",
    "{clinic} review for {}",
    "{} treated with antibiotics",
    "{} well controlled",
    "inhalers and tablets for {}",
    "{} reviewed in {clinic} clinic",
];

const NEGATED: [&str; 4] = [
    "no evidence of {}",
    "not {}",
    "{} ruled out",
    "no history of {}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub test_positives: usize,
    /// Fraction of positive notes whose term receives one character edit.
    pub misspell_rate: f64,
    /// Term surfaces excluded from both splits.
    pub holdout: Vec<String>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_train: 6000,
            n_test: 1000,
            test_positives: 31,
            misspell_rate: 0.05,
            holdout: HOLDOUT_TERMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<NoteRecord>,
    pub test: Vec<NoteRecord>,
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    terms: Vec<&'a Term>,
    misspell_rate: f64,
}

impl<'a> Gen<'a> {
    fn new(seed: u64, stream: u64, terms: Vec<&'a Term>, misspell_rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            terms,
            misspell_rate,
        }
    }

    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        *xs.choose(&mut self.rng).expect("non-empty pool")
    }

    fn year(&mut self) -> String {
        self.rng.gen_range(2005..=2020).to_string()
    }

    fn fill(&mut self, frame: &str, x: &str) -> String {
        let mut s = frame.replacen("{}", x, 1);
        while s.contains("{year}") {
            let y = self.year();
            s = s.replacen("{year}", &y, 1);
        }
        while s.contains("{other}") {
            let o = self.pick(&CONDITIONS);
            s = s.replacen("{other}", o, 1);
        }
        while s.contains("{site}") {
            let o = self.pick(&SITES);
            s = s.replacen("{site}", o, 1);
        }
        while s.contains("{clinic}") {
            let o = self.pick(&CLINICS);
            s = s.replacen("{clinic}", o, 1);
        }
        s
    }

    fn misspell(&mut self, word: &str) -> String {
        let mut chars: Vec<char> = word.chars().collect();
        let i = self.rng.gen_range(1..chars.len() - 1);
        let letter = (b'a' + self.rng.gen_range(0..26)) as char;
        match self.rng.gen_range(0..4) {
            0 => chars[i] = letter,
            1 => {
                chars.remove(i);
            }
            2 => chars.insert(i, letter),
            _ => chars.swap(i, i + 1),
        }
        chars.into_iter().collect()
    }

    /// A cancer phrase built around one term.
    fn cancer_phrase(&mut self, term: &Term, allow_misspell: bool) -> String {
        let keep_case = term.has_acronym_token();
        let mut t = if keep_case {
            term.surface.clone()
        } else {
            match self.rng.gen_range(0..20) {
                0..=13 => term.surface.to_lowercase(),
                14..=18 => term.surface.clone(),
                _ => term.surface.to_uppercase(),
            }
        };
        if allow_misspell && self.rng.gen_bool(self.misspell_rate) {
            let words = split_words(&t);
            let candidates: Vec<&str> = words
                .iter()
                .copied()
                .filter(|w| {
                    w.len() >= 4
                        && w.chars().all(|c| c.is_ascii_alphabetic())
                        && !super::terms::is_acronym(w)
                })
                .collect();
            if let Some(&w) = candidates.choose(&mut self.rng) {
                let edited = self.misspell(w);
                t = t.replacen(w, &edited, 1);
            }
        }
        let key = term.surface.to_lowercase();
        if ADJECTIVES.contains(&key.as_str()) {
            let n = self.pick(&ADJ_NOUNS);
            return format!("{t} {n}");
        }
        if SITED.contains(&key.as_str()) && self.rng.gen_bool(0.7) {
            let site = self.pick(&SITES);
            return match key.as_str() {
                "ca" | "scc" if self.rng.gen_bool(0.5) => format!("{t} {site}"),
                "metastases" | "mets" | "met" => format!("{t} to {site}"),
                _ => format!("{site} {t}"),
            };
        }
        t
    }

    fn note(&mut self, label: Label) -> String {
        loop {
            let text = match label {
                Label::Positive => {
                    let term = self.pick(&self.terms.clone());
                    let x = self.cancer_phrase(term, true);
                    let f = self.pick(&FRAMES);
                    self.fill(f, &x)
                }
                Label::Negative => {
                    if self.rng.gen_bool(0.1) {
                        self.pick(&PLAIN).to_string()
                    } else {
                        let x = self.pick(&CONDITIONS);
                        let f = self.pick(&FRAMES);
                        self.fill(f, x)
                    }
                }
            };
            let n = tokenize_words(&text).len();
            if (2..=12).contains(&n) {
                return text;
            }
        }
    }

    fn records(&mut self, prefix: &str, n_pos: usize, n_neg: usize) -> Vec<NoteRecord> {
        let mut labels: Vec<Label> = std::iter::repeat_n(Label::Positive, n_pos)
            .chain(std::iter::repeat_n(Label::Negative, n_neg))
            .collect();
        labels.shuffle(&mut self.rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| NoteRecord {
                id: format!("{prefix}-{i}"),
                text: self.note(label),
                label,
                origin: Origin::CorpusSynthetic,
            })
            .collect()
    }
}

fn pool<'a>(terms: &'a TermList, holdout: &[String]) -> Vec<&'a Term> {
    terms
        .entries
        .iter()
        .filter(|t| !holdout.contains(&t.surface))
        .collect()
}

/// Balanced training notes and a test set with exact class counts.
pub fn synth_corpus(seed: u64, opts: &SynthOptions, terms: &TermList) -> CorpusSplit {
    let p = pool(terms, &opts.holdout);
    let n_pos = opts.n_train / 2;
    let train = Gen::new(seed, 1, p.clone(), opts.misspell_rate).records(
        "train",
        n_pos,
        opts.n_train - n_pos,
    );
    let test_pos = opts.test_positives.min(opts.n_test);
    let test =
        Gen::new(seed, 2, p, opts.misspell_rate).records("test", test_pos, opts.n_test - test_pos);
    CorpusSplit { train, test }
}

/// Positive notes that mention only held-out terms.
pub fn holdout_positives(
    seed: u64,
    n: usize,
    terms: &TermList,
    holdout: &[&str],
) -> Vec<NoteRecord> {
    let p: Vec<&Term> = terms
        .entries
        .iter()
        .filter(|t| holdout.contains(&t.surface.as_str()))
        .collect();
    let mut g = Gen::new(seed, 3, p, 0.0);
    (0..n)
        .map(|i| NoteRecord {
            id: format!("holdout-{i}"),
            text: g.note(Label::Positive),
            label: Label::Positive,
            origin: Origin::CorpusSynthetic,
        })
        .collect()
}

/// Unlabelled sentences for masked-token pretraining. Every term, held out
/// or not, appears in cancer-specific contexts; other conditions appear in
/// their own contexts; the classification frames appear for both.
pub fn pretraining_corpus(seed: u64, n: usize, terms: &TermList) -> Vec<String> {
    let all: Vec<&Term> = terms.entries.iter().collect();
    let mut g = Gen::new(seed, 4, all.clone(), 0.0);
    (0..n)
        .map(|_| {
            let cancer = g.rng.gen_bool(0.5);
            let x = if cancer {
                let t = g.pick(&all);
                g.cancer_phrase(t, false)
            } else {
                g.pick(&CONDITIONS).to_string()
            };
            let frame = match g.rng.gen_range(0..10) {
                0..=4 if cancer => g.pick(&CANCER_CONTEXTS),
                0..=4 => g.pick(&OTHER_CONTEXTS),
                5 => g.pick(&NEGATED),
                _ => g.pick(&FRAMES),
            };
            g.fill(frame, &x)
        })
        .collect()
}
