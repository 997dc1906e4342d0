use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ReportRecord;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Prng};

/// Label schema of a synthetic corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    /// 14 chest radiograph labels with codes {+1, 0, -1, +2}.
    #[default]
    Chest14,
    /// 18 chest CT labels with binary codes {0, +1}.
    Ct18,
}

struct LabelDef {
    name: &'static str,
    phrases: &'static [&'static str],
    prevalence: f64,
}

const fn label(name: &'static str, phrases: &'static [&'static str], prevalence: f64) -> LabelDef {
    LabelDef { name, phrases, prevalence }
}

/// Active exactly when no other label is.
const NO_FINDING: &str = "No Finding";

const CHEST: [LabelDef; 14] = [
    label("Enlarged Cardiomediastinum", &["widened mediastinum", "enlarged cardiomediastinal silhouette", "mediastinal widening"], 0.10),
    label("Cardiomegaly", &["cardiomegaly", "enlarged heart", "increased cardiac size"], 0.25),
    label("Lung Opacity", &["lung opacity", "hazy opacification", "airspace opacity"], 0.30),
    label("Lung Lesion", &["lung lesion", "pulmonary mass", "spiculated lesion"], 0.08),
    label("Edema", &["pulmonary edema", "interstitial edema", "vascular congestion"], 0.18),
    label("Consolidation", &["consolidation", "lobar consolidation", "dense consolidation"], 0.10),
    label("Pneumonia", &["pneumonia", "infectious process", "bronchopneumonia"], 0.12),
    label("Atelectasis", &["atelectasis", "bibasilar atelectasis", "volume loss"], 0.25),
    label("Pneumothorax", &["pneumothorax", "apical pneumothorax", "collapsed lung"], 0.06),
    label("Pleural Effusion", &["pleural effusion", "layering effusion", "blunted costophrenic angle"], 0.28),
    label("Pleural Other", &["pleural thickening", "pleural plaque", "pleural scarring"], 0.05),
    label("Fracture", &["rib fracture", "fracture", "cortical break"], 0.07),
    label("Support Devices", &["endotracheal tube", "central venous catheter", "pacemaker leads"], 0.30),
    label(NO_FINDING, &["no acute cardiopulmonary process", "clear lungs", "normal chest radiograph"], 0.0),
];

const CT: [LabelDef; 18] = [
    label("Medical material", &["surgical clips", "port catheter", "medical material"], 0.12),
    label("Arterial wall calcification", &["aortic calcification", "arterial wall calcification", "calcified atheroma"], 0.30),
    label("Cardiomegaly", &["cardiomegaly", "enlarged heart", "increased cardiothoracic ratio"], 0.12),
    label("Pericardial effusion", &["pericardial effusion", "pericardial fluid"], 0.07),
    label("Coronary artery wall calcification", &["coronary calcification", "coronary artery calcifications"], 0.25),
    label("Hiatal hernia", &["hiatal hernia", "herniated stomach"], 0.10),
    label("Lymphadenopathy", &["lymphadenopathy", "enlarged lymph nodes", "mediastinal adenopathy"], 0.20),
    label("Emphysema", &["emphysema", "centrilobular emphysema", "paraseptal emphysema"], 0.18),
    label("Atelectasis", &["atelectasis", "subsegmental atelectasis"], 0.22),
    label("Lung nodule", &["lung nodule", "pulmonary nodule", "nodular density"], 0.30),
    label("Lung opacity", &["ground glass opacity", "lung opacity"], 0.25),
    label("Pulmonary fibrotic sequela", &["fibrotic sequela", "fibrotic bands", "parenchymal scarring"], 0.20),
    label("Pleural effusion", &["pleural effusion", "pleural fluid"], 0.10),
    label("Mosaic attenuation pattern", &["mosaic attenuation", "mosaic perfusion"], 0.07),
    label("Peribronchial thickening", &["peribronchial thickening", "bronchial wall thickening"], 0.10),
    label("Consolidation", &["consolidation", "consolidative area"], 0.08),
    label("Bronchiectasis", &["bronchiectasis", "dilated bronchi"], 0.08),
    label("Interlobular septal thickening", &["interlobular septal thickening", "septal lines"], 0.06),
];

const POSITIVE: &[&str] = &[
    "there is {p} .",
    "{p} is noted .",
    "findings are consistent with {p} .",
    "{p} is seen in the {loc} .",
    "evidence of {p} .",
    "{p} is again demonstrated .",
];
const UNCERTAIN: &[&str] = &["possible {p} .", "{p} cannot be excluded .", "questionable {p} ."];
const NEGATED: &[&str] = &["no {p} .", "no evidence of {p} .", "{p} is not seen ."];
const LOCATIONS: &[&str] = &[
    "right upper lobe",
    "left upper lobe",
    "right middle lobe",
    "lingula",
    "right lower lobe",
    "left lower lobe",
    "right base",
    "left base",
];
const DISTRACTORS: &[&str] = &[
    "comparison is made with the prior examination .",
    "the osseous structures are unremarkable .",
    "the visualized upper abdomen is unremarkable .",
    "the trachea is midline .",
    "there is mild degenerative change of the spine .",
    "the patient is status post {proc} .",
    "technique : portable upright view .",
    "soft tissues are within normal limits .",
];
const PROCEDURES: &[&str] = &["cholecystectomy", "sternotomy", "appendectomy", "thyroidectomy"];
const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ru", "se", "ta", "vo", "ne", "pi", "zu", "de", "gor"];

impl Schema {
    fn defs(self) -> &'static [LabelDef] {
        match self {
            Schema::Chest14 => &CHEST,
            Schema::Ct18 => &CT,
        }
    }

    pub fn n_labels(self) -> usize {
        self.defs().len()
    }

    pub fn label_names(self) -> Vec<&'static str> {
        self.defs().iter().map(|d| d.name).collect()
    }

    /// Probability that each label is active for a patient. The derived
    /// "No Finding" label is active only when every other label is absent.
    pub fn prevalences(self) -> Vec<f64> {
        let defs = self.defs();
        let none: f64 = defs
            .iter()
            .filter(|d| d.name != NO_FINDING)
            .map(|d| 1.0 - d.prevalence)
            .product();
        defs.iter()
            .map(|d| if d.name == NO_FINDING { none } else { d.prevalence })
            .collect()
    }

    /// Whether the schema uses the uncertain (-1) and no-data (+2) codes.
    pub fn has_uncertain_codes(self) -> bool {
        self == Schema::Chest14
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub schema: Schema,
    pub n_patients: usize,
    pub min_reports: usize,
    pub max_reports: usize,
    /// Chance that an active label is coded -1 in a report.
    pub uncertain_rate: f64,
    /// Chance that an active label is coded +2 (not mentioned) in a report.
    pub no_data_rate: f64,
    /// Chance that an inactive label gets an explicit negative mention.
    pub negation_rate: f64,
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            schema: Schema::Chest14,
            n_patients: 2000,
            min_reports: 1,
            max_reports: 3,
            uncertain_rate: 0.05,
            no_data_rate: 0.03,
            negation_rate: 0.08,
            min_phrases: 2,
            max_phrases: 4,
            min_distractors: 1,
            max_distractors: 3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.n_patients < 10 {
            return Err(Error::config(format!("n_patients {} is below 10", self.n_patients)));
        }
        let ranges = [
            ("reports", self.min_reports, self.max_reports),
            ("phrases", self.min_phrases, self.max_phrases),
            ("distractors", self.min_distractors, self.max_distractors),
        ];
        for (what, lo, hi) in ranges {
            if lo > hi || (what != "distractors" && lo == 0) {
                return Err(Error::config(format!("bad {what} range {lo}..={hi}")));
            }
        }
        for (what, r) in [
            ("uncertain_rate", self.uncertain_rate),
            ("no_data_rate", self.no_data_rate),
            ("negation_rate", self.negation_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{what} {r} outside [0,1]")));
            }
        }
        if self.uncertain_rate + self.no_data_rate > 1.0 {
            return Err(Error::config("uncertain_rate + no_data_rate exceeds 1"));
        }
        Ok(())
    }
}

fn fill(template: &str, phrase: &str, rng: &mut Prng) -> String {
    let mut s = template.replace("{p}", phrase);
    if s.contains("{loc}") {
        s = s.replace("{loc}", LOCATIONS.choose(rng).expect("non-empty"));
    }
    if s.contains("{proc}") {
        s = s.replace("{proc}", PROCEDURES.choose(rng).expect("non-empty"));
    }
    s
}

/// Patient-specific details repeated in every report of that patient.
struct Signature {
    words: [String; 3],
    size_mm: u32,
    weeks: u32,
    location: &'static str,
}

impl Signature {
    fn draw(rng: &mut Prng) -> Self {
        let mut word = || {
            let a = SYLLABLES.choose(rng).expect("non-empty");
            let b = SYLLABLES.choose(rng).expect("non-empty");
            format!("{a}{b}")
        };
        Signature {
            words: [word(), word(), word()],
            size_mm: rng.random_range(2..60),
            weeks: rng.random_range(1..13),
            location: LOCATIONS.choose(rng).expect("non-empty"),
        }
    }
}

fn report_codes(active: &[bool], cfg: &GeneratorConfig, rng: &mut Prng) -> Vec<i8> {
    active
        .iter()
        .map(|&on| {
            if !on {
                return 0;
            }
            if !cfg.schema.has_uncertain_codes() {
                return 1;
            }
            let u: f64 = rng.random();
            if u < cfg.uncertain_rate {
                -1
            } else if u < cfg.uncertain_rate + cfg.no_data_rate {
                2
            } else {
                1
            }
        })
        .collect()
}

fn report_text(codes: &[i8], sig: &Signature, cfg: &GeneratorConfig, rng: &mut Prng) -> (String, String) {
    let defs = cfg.schema.defs();
    let mut sentences: Vec<String> = Vec::new();
    for (def, &code) in defs.iter().zip(codes) {
        match code {
            1 => {
                let k = rng.random_range(cfg.min_phrases..=cfg.max_phrases);
                for _ in 0..k {
                    let phrase = def.phrases.choose(rng).expect("non-empty");
                    let t = POSITIVE.choose(rng).expect("non-empty");
                    sentences.push(fill(t, phrase, rng));
                }
            }
            -1 => {
                let phrase = def.phrases.choose(rng).expect("non-empty");
                let t = UNCERTAIN.choose(rng).expect("non-empty");
                sentences.push(fill(t, phrase, rng));
            }
            0 if def.name != NO_FINDING && rng.random::<f64>() < cfg.negation_rate => {
                let phrase = def.phrases.choose(rng).expect("non-empty");
                let t = NEGATED.choose(rng).expect("non-empty");
                sentences.push(fill(t, phrase, rng));
            }
            _ => {}
        }
    }
    let k = rng.random_range(cfg.min_distractors..=cfg.max_distractors);
    for _ in 0..k {
        let t = DISTRACTORS.choose(rng).expect("non-empty");
        sentences.push(fill(t, "", rng));
    }
    sentences.push(format!(
        "a {} mm focus in the {} is tagged {} .",
        sig.size_mm, sig.location, sig.words[0]
    ));
    sentences.shuffle(rng);
    let positives: Vec<&str> = defs
        .iter()
        .zip(codes)
        .filter(|(_, &c)| c == 1)
        .map(|(d, _)| d.phrases[0])
        .collect();
    let summary = if positives.is_empty() {
        "no acute abnormality".to_string()
    } else {
        positives.join(" and ")
    };
    let impression = format!(
        "impression : {summary} . follow up with {} {} in {} weeks .",
        sig.words[1], sig.words[2], sig.weeks
    );
    (sentences.join(" "), impression)
}

/// Deterministic synthetic reports. Every patient has a fixed condition
/// profile shared by their 1–3 reports; each report codes active labels
/// +1 (or, in the 14-label schema, occasionally -1 or +2) and writes
/// label phrases, negations, distractors and patient-specific details.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig) -> Result<Vec<ReportRecord>> {
    cfg.validate()?;
    let defs = cfg.schema.defs();
    let mut records = Vec::new();
    let mut report_no = 0usize;
    for p in 0..cfg.n_patients {
        let mut rng = rng_for(cfg.seed, "synth-patient", p as u64);
        let mut active: Vec<bool> = defs
            .iter()
            .map(|d| d.name != NO_FINDING && rng.random::<f64>() < d.prevalence)
            .collect();
        if let Some(nf) = defs.iter().position(|d| d.name == NO_FINDING) {
            active[nf] = !active.iter().any(|&a| a);
        }
        let sig = Signature::draw(&mut rng);
        let n_reports = rng.random_range(cfg.min_reports..=cfg.max_reports);
        for _ in 0..n_reports {
            let codes = report_codes(&active, cfg, &mut rng);
            let (findings, impression) = report_text(&codes, &sig, cfg, &mut rng);
            records.push(ReportRecord {
                patient_id: format!("p{p:05}"),
                report_id: format!("r{report_no:06}"),
                findings,
                impression,
                raw_labels: codes,
            });
            report_no += 1;
        }
    }
    Ok(records)
}
