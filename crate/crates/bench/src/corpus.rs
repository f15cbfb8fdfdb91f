//! Corpus generation: themed object co-occurrence structure, training
//! examples (presence QA plus listings), and evaluation splits with
//! random / popular / adversarial negative sampling, all fully determined
//! by one seed.

use std::collections::HashSet;

use lime_core::metrics::PopeLabel;
use lime_core::model::train::TrainExample;
use lime_core::model::tokens;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{Dimensionality, Scene};
use crate::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub dimensionality: Dimensionality,
    /// Number of distinct object symbols in the vocabulary.
    pub object_count: usize,
    /// Symbols are partitioned into this many equal themes; scenes mostly
    /// stay within one theme, which is what gives the corpus a co-occurrence
    /// structure for adversarial negatives to exploit.
    pub theme_count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that each object after the first is drawn from the
    /// scene's theme rather than the full vocabulary.
    pub theme_coherence: f64,
    /// Trailing per-cell feature dimensions filled with seeded noise.
    pub noise_width: usize,
    /// Noise amplitude (uniform in ±this).
    pub patch_noise: f64,
    pub training_scenes: usize,
    pub eval_scenes: usize,
    /// Include one listing example per training scene alongside the two QA
    /// examples. Off, the training set is pure QA.
    pub caption_training: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            dimensionality: Dimensionality::Grid2d { rows: 4, cols: 4 },
            object_count: 24,
            theme_count: 4,
            min_objects: 2,
            max_objects: 4,
            theme_coherence: 0.85,
            noise_width: 8,
            patch_noise: 0.05,
            training_scenes: 400,
            eval_scenes: 100,
            caption_training: true,
        }
    }
}

impl CorpusConfig {
    /// Per-cell feature width: one-hot symbol block plus the noise tail.
    pub fn patch_width(&self) -> usize {
        self.object_count + self.noise_width
    }

    /// Smallest model vocabulary that can name every object.
    pub fn vocab_size(&self) -> usize {
        tokens::FIRST_OBJECT + self.object_count
    }

    pub fn theme_size(&self) -> usize {
        self.object_count / self.theme_count
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.dimensionality.cell_count();
        if cells == 0 {
            return Err(BenchError::Config("scene has zero cells".into()));
        }
        if self.object_count == 0 || self.theme_count == 0 {
            return Err(BenchError::Config(
                "object and theme counts must be positive".into(),
            ));
        }
        if self.object_count % self.theme_count != 0 {
            return Err(BenchError::Config(format!(
                "{} objects do not divide into {} equal themes",
                self.object_count, self.theme_count
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(BenchError::Config(format!(
                "invalid objects-per-scene range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > cells {
            return Err(BenchError::Config(format!(
                "{} objects per scene cannot fit in {} cells",
                self.max_objects, cells
            )));
        }
        if self.max_objects > self.theme_size() {
            return Err(BenchError::Config(format!(
                "{} objects per scene exceed the theme size {}",
                self.max_objects,
                self.theme_size()
            )));
        }
        if self.max_objects >= self.object_count {
            return Err(BenchError::Config(
                "every symbol could be present at once; negatives would be impossible".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.theme_coherence) {
            return Err(BenchError::Config(format!(
                "theme coherence {} outside [0, 1]",
                self.theme_coherence
            )));
        }
        if self.noise_width == 0 || !self.patch_noise.is_finite() || self.patch_noise < 0.0 {
            return Err(BenchError::Config(
                "noise width must be positive and amplitude non-negative finite".into(),
            ));
        }
        if self.training_scenes == 0 || self.eval_scenes == 0 {
            return Err(BenchError::Config(
                "training and eval scene counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Random,
    Popular,
    Adversarial,
    /// Diagnostic split where corpus priors point at the correct answer:
    /// positives ask about the most corpus-frequent present symbol,
    /// negatives about the least frequent absent one. A model leaning on
    /// textual priors beats chance here even with the scene withheld.
    PopularConfusion,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Random => "random",
            SplitKind::Popular => "popular",
            SplitKind::Adversarial => "adversarial",
            SplitKind::PopularConfusion => "popular-confusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub scene: Scene,
    pub query_symbol: usize,
    pub label: PopeLabel,
    pub split: SplitKind,
}

impl QaExample {
    fn new(scene: Scene, query_symbol: usize, split: SplitKind) -> QaExample {
        let label = if scene.contains(query_symbol) {
            PopeLabel::Yes
        } else {
            PopeLabel::No
        };
        QaExample {
            scene,
            query_symbol,
            label,
            split,
        }
    }

    pub fn label_token(&self) -> usize {
        match self.label {
            PopeLabel::Yes => tokens::YES,
            PopeLabel::No => tokens::NO,
        }
    }

    /// Supervised form: prompt, gold completion, grounding region.
    pub fn train_example(&self) -> TrainExample {
        TrainExample {
            patches: self.scene.patches(),
            grounding: self.scene.region_of(self.query_symbol),
            prompt_text: self.scene.qa_prompt(self.query_symbol),
            completion: vec![self.label_token(), tokens::EOS],
        }
    }
}

/// Supervised object-listing form of a scene.
pub fn caption_example(scene: &Scene) -> TrainExample {
    TrainExample {
        patches: scene.patches(),
        grounding: scene.occupied_cells(),
        prompt_text: scene.caption_prompt(),
        completion: scene.caption_completion(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalSplits {
    pub random: Vec<QaExample>,
    pub popular: Vec<QaExample>,
    pub adversarial: Vec<QaExample>,
    pub popular_confusion: Vec<QaExample>,
    pub caption_scenes: Vec<Scene>,
}

impl EvalSplits {
    pub fn by_kind(&self, kind: SplitKind) -> &[QaExample] {
        match kind {
            SplitKind::Random => &self.random,
            SplitKind::Popular => &self.popular,
            SplitKind::Adversarial => &self.adversarial,
            SplitKind::PopularConfusion => &self.popular_confusion,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub training_scenes: Vec<Scene>,
    pub training: Vec<TrainExample>,
    /// Number of training scenes each symbol appears in.
    pub object_frequency: Vec<usize>,
    /// Number of training scenes containing both symbols.
    pub co_occurrence: Vec<Vec<usize>>,
    pub eval: EvalSplits,
}

/// Zipf-style weight of a symbol: rank within its theme, heavier heads.
fn symbol_weight(symbol: usize, theme_size: usize) -> f64 {
    1.0 / (1.0 + (symbol % theme_size) as f64)
}

fn draw_weighted(rng: &mut ChaCha8Rng, candidates: &[usize], theme_size: usize) -> usize {
    let total: f64 = candidates
        .iter()
        .map(|&s| symbol_weight(s, theme_size))
        .sum();
    let mut u = rng.gen::<f64>() * total;
    for &s in candidates {
        u -= symbol_weight(s, theme_size);
        if u <= 0.0 {
            return s;
        }
    }
    *candidates.last().expect("non-empty candidate set")
}

fn generate_scene(id: u64, config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Scene {
    let cells_n = config.dimensionality.cell_count();
    let theme_size = config.theme_size();
    let count = config.min_objects + rng.gen_range(0..=(config.max_objects - config.min_objects));
    let theme = rng.gen_range(0..config.theme_count);
    let theme_members: Vec<usize> = (theme * theme_size..(theme + 1) * theme_size).collect();
    let all_symbols: Vec<usize> = (0..config.object_count).collect();

    let mut symbols: Vec<usize> = Vec::with_capacity(count);
    while symbols.len() < count {
        let coherent = symbols.is_empty() || rng.gen::<f64>() < config.theme_coherence;
        let pool = if coherent { &theme_members } else { &all_symbols };
        let s = draw_weighted(rng, pool, theme_size);
        if !symbols.contains(&s) {
            symbols.push(s);
        }
    }

    let mut cells: Vec<Option<usize>> = vec![None; cells_n];
    for &s in &symbols {
        loop {
            let c = rng.gen_range(0..cells_n);
            if cells[c].is_none() {
                cells[c] = Some(s);
                break;
            }
        }
    }

    let width = config.patch_width();
    let mut data = vec![0.0; cells_n * width];
    for (i, cell) in cells.iter().enumerate() {
        if let Some(s) = cell {
            data[i * width + s] = 1.0;
        }
        for k in 0..config.noise_width {
            data[i * width + config.object_count + k] =
                (rng.gen::<f64>() * 2.0 - 1.0) * config.patch_noise;
        }
    }

    Scene::new(id, config.dimensionality, cells, width, data).expect("generated shapes consistent")
}

fn absent_symbols(scene: &Scene, object_count: usize) -> Vec<usize> {
    let present = scene.object_inventory();
    (0..object_count).filter(|s| !present.contains(s)).collect()
}

/// Uniform draw over symbols absent from the scene.
pub fn random_negative(scene: &Scene, object_count: usize, rng: &mut ChaCha8Rng) -> usize {
    let absent = absent_symbols(scene, object_count);
    absent[rng.gen_range(0..absent.len())]
}

/// Symbols ordered by descending training-corpus frequency (ties toward the
/// lower symbol index).
fn frequency_order(frequency: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frequency.len()).collect();
    order.sort_by_key(|&s| (std::cmp::Reverse(frequency[s]), s));
    order
}

/// Draw from the top corpus-frequency decile restricted to absent symbols;
/// if every top-decile symbol is present, fall back to the most frequent
/// absent symbol.
pub fn popular_negative(scene: &Scene, frequency: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let present = scene.object_inventory();
    let order = frequency_order(frequency);
    let decile = frequency.len().div_ceil(10);
    let pool: Vec<usize> = order
        .iter()
        .take(decile)
        .copied()
        .filter(|s| !present.contains(s))
        .collect();
    if pool.is_empty() {
        return *order
            .iter()
            .find(|s| !present.contains(s))
            .expect("some symbol is absent");
    }
    pool[rng.gen_range(0..pool.len())]
}

/// Draw among the three absent symbols that most frequently co-occur with
/// the scene's present objects in the training corpus.
pub fn adversarial_negative(
    scene: &Scene,
    co_occurrence: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> usize {
    let present: Vec<usize> = scene.object_inventory().into_iter().collect();
    let mut absent: Vec<usize> = absent_symbols(scene, co_occurrence.len());
    let score = |s: usize| -> usize { present.iter().map(|&p| co_occurrence[s][p]).sum() };
    absent.sort_by_key(|&s| (std::cmp::Reverse(score(s)), s));
    let k = absent.len().min(3);
    absent[rng.gen_range(0..k)]
}

/// Mean training-corpus co-occurrence between a query symbol and a scene's
/// present objects; used to verify the adversarial split is what it claims.
pub fn co_occurrence_with_scene(
    scene: &Scene,
    symbol: usize,
    co_occurrence: &[Vec<usize>],
) -> f64 {
    let present: Vec<usize> = scene.object_inventory().into_iter().collect();
    if present.is_empty() {
        return 0.0;
    }
    present
        .iter()
        .map(|&p| co_occurrence[symbol][p] as f64)
        .sum::<f64>()
        / present.len() as f64
}

fn cell_key(scene: &Scene) -> Vec<u8> {
    scene
        .cells
        .iter()
        .map(|c| c.map(|s| s as u8 + 1).unwrap_or(0))
        .collect()
}

/// Build the full deterministic corpus: training scenes and examples,
/// corpus statistics, and evaluation splits on held-out scenes.
pub fn generate_corpus(seed: u64, config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut training_scenes = Vec::with_capacity(config.training_scenes);
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    for id in 0..config.training_scenes as u64 {
        let scene = generate_scene(id, config, &mut rng);
        seen.insert(cell_key(&scene));
        training_scenes.push(scene);
    }

    let mut object_frequency = vec![0usize; config.object_count];
    let mut co_occurrence = vec![vec![0usize; config.object_count]; config.object_count];
    for scene in &training_scenes {
        let present: Vec<usize> = scene.object_inventory().into_iter().collect();
        for &s in &present {
            object_frequency[s] += 1;
        }
        for (i, &a) in present.iter().enumerate() {
            for &b in present.iter().skip(i + 1) {
                co_occurrence[a][b] += 1;
                co_occurrence[b][a] += 1;
            }
        }
    }

    let per_scene = if config.caption_training { 3 } else { 2 };
    let mut training = Vec::with_capacity(config.training_scenes * per_scene);
    for scene in &training_scenes {
        let present: Vec<usize> = scene.object_inventory().into_iter().collect();
        let positive = present[rng.gen_range(0..present.len())];
        let negative = random_negative(scene, config.object_count, &mut rng);
        training.push(QaExample::new(scene.clone(), positive, SplitKind::Random).train_example());
        training.push(QaExample::new(scene.clone(), negative, SplitKind::Random).train_example());
        if config.caption_training {
            training.push(caption_example(scene));
        }
    }

    // Held-out scenes: reject any layout already used for training (or an
    // earlier eval scene) so the splits are disjoint by content, not just id.
    let mut eval_scenes = Vec::with_capacity(config.eval_scenes);
    let mut next_id = config.training_scenes as u64;
    while eval_scenes.len() < config.eval_scenes {
        let scene = generate_scene(next_id, config, &mut rng);
        next_id += 1;
        if seen.insert(cell_key(&scene)) {
            eval_scenes.push(scene);
        }
    }

    let mut random = Vec::new();
    let mut popular = Vec::new();
    let mut adversarial = Vec::new();
    let mut popular_confusion = Vec::new();
    for scene in &eval_scenes {
        let present: Vec<usize> = scene.object_inventory().into_iter().collect();
        let positive = present[rng.gen_range(0..present.len())];
        let rand_neg = random_negative(scene, config.object_count, &mut rng);
        let pop_neg = popular_negative(scene, &object_frequency, &mut rng);
        let adv_neg = adversarial_negative(scene, &co_occurrence, &mut rng);

        random.push(QaExample::new(scene.clone(), positive, SplitKind::Random));
        random.push(QaExample::new(scene.clone(), rand_neg, SplitKind::Random));
        popular.push(QaExample::new(scene.clone(), positive, SplitKind::Popular));
        popular.push(QaExample::new(scene.clone(), pop_neg, SplitKind::Popular));
        adversarial.push(QaExample::new(scene.clone(), positive, SplitKind::Adversarial));
        adversarial.push(QaExample::new(scene.clone(), adv_neg, SplitKind::Adversarial));

        let conf_pos = *present
            .iter()
            .min_by_key(|&&s| (std::cmp::Reverse(object_frequency[s]), s))
            .expect("scene has objects");
        let absent = absent_symbols(scene, config.object_count);
        let conf_neg = *absent
            .iter()
            .min_by_key(|&&s| (object_frequency[s], s))
            .expect("some symbol absent");
        popular_confusion.push(QaExample::new(
            scene.clone(),
            conf_pos,
            SplitKind::PopularConfusion,
        ));
        popular_confusion.push(QaExample::new(
            scene.clone(),
            conf_neg,
            SplitKind::PopularConfusion,
        ));
    }

    Ok(Corpus {
        seed,
        config: config.clone(),
        training_scenes,
        training,
        object_frequency,
        co_occurrence,
        eval: EvalSplits {
            random,
            popular,
            adversarial,
            popular_confusion,
            caption_scenes: eval_scenes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::object_token;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            training_scenes: 120,
            eval_scenes: 40,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_corpora() {
        let config = small_config();
        let a = generate_corpus(11, &config).unwrap();
        let b = generate_corpus(11, &config).unwrap();
        assert_eq!(a.training_scenes, b.training_scenes);
        assert_eq!(a.object_frequency, b.object_frequency);
        assert_eq!(a.co_occurrence, b.co_occurrence);
        assert_eq!(a.training.len(), b.training.len());
        for (x, y) in a.training.iter().zip(b.training.iter()) {
            assert_eq!(x.patches, y.patches);
            assert_eq!(x.grounding, y.grounding);
            assert_eq!(x.prompt_text, y.prompt_text);
            assert_eq!(x.completion, y.completion);
        }
        let ser = |s: &EvalSplits| {
            serde_json::to_string(&(
                &s.random,
                &s.popular,
                &s.adversarial,
                &s.popular_confusion,
                &s.caption_scenes,
            ))
            .unwrap()
        };
        assert_eq!(ser(&a.eval), ser(&b.eval));
        let c = generate_corpus(12, &config).unwrap();
        assert_ne!(ser(&a.eval), ser(&c.eval), "different seeds must differ");
    }

    #[test]
    fn eval_scenes_are_disjoint_from_training_scenes() {
        let corpus = generate_corpus(3, &small_config()).unwrap();
        let training_keys: HashSet<Vec<u8>> =
            corpus.training_scenes.iter().map(cell_key).collect();
        for scene in &corpus.eval.caption_scenes {
            assert!(
                !training_keys.contains(&cell_key(scene)),
                "eval scene {} duplicates a training layout",
                scene.id
            );
        }
        let training_ids: HashSet<u64> = corpus.training_scenes.iter().map(|s| s.id).collect();
        for scene in &corpus.eval.caption_scenes {
            assert!(!training_ids.contains(&scene.id));
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut config = CorpusConfig::default();
        config.dimensionality = Dimensionality::Grid2d { rows: 1, cols: 3 };
        assert!(
            generate_corpus(0, &config).is_err(),
            "four objects cannot fit three cells"
        );
        let config = CorpusConfig {
            min_objects: 5,
            max_objects: 4,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(0, &config).is_err());
        let config = CorpusConfig {
            object_count: 25,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(0, &config).is_err(), "25 % 4 themes != 0");
    }

    #[test]
    fn random_negatives_are_uniform_over_absent_symbols() {
        let corpus = generate_corpus(5, &small_config()).unwrap();
        let scene = &corpus.eval.caption_scenes[0];
        let absent = absent_symbols(scene, corpus.config.object_count);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 10_000usize;
        let mut counts = vec![0u64; corpus.config.object_count];
        for _ in 0..draws {
            counts[random_negative(scene, corpus.config.object_count, &mut rng)] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            assert_eq!(
                c > 0,
                absent.contains(&s),
                "symbol {s} drawn {c} times, absent={}",
                absent.contains(&s)
            );
        }
        let expected = draws as f64 / absent.len() as f64;
        let chi2: f64 = absent
            .iter()
            .map(|&s| {
                let d = counts[s] as f64 - expected;
                d * d / expected
            })
            .sum();
        // Upper 1% critical values of the chi-square distribution.
        let critical = match absent.len() - 1 {
            15 => 30.578,
            16 => 32.000,
            17 => 33.409,
            18 => 34.805,
            19 => 36.191,
            20 => 37.566,
            21 => 38.932,
            22 => 40.289,
            23 => 41.638,
            df => panic!("no critical value tabulated for df {df}"),
        };
        assert!(
            chi2 < critical,
            "chi-square {chi2} exceeds the 1% critical value {critical}"
        );
    }

    #[test]
    fn adversarial_negatives_co_occur_more_than_random_ones() {
        let corpus = generate_corpus(21, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut adv_total = 0.0;
        let mut rand_total = 0.0;
        let mut n = 0usize;
        for scene in &corpus.eval.caption_scenes {
            for _ in 0..8 {
                let a = adversarial_negative(scene, &corpus.co_occurrence, &mut rng);
                let r = random_negative(scene, corpus.config.object_count, &mut rng);
                adv_total += co_occurrence_with_scene(scene, a, &corpus.co_occurrence);
                rand_total += co_occurrence_with_scene(scene, r, &corpus.co_occurrence);
                n += 1;
            }
        }
        assert!(
            adv_total / n as f64 > rand_total / n as f64,
            "adversarial mean co-occurrence {} not above random {}",
            adv_total / n as f64,
            rand_total / n as f64
        );
    }

    #[test]
    fn popular_negatives_come_from_the_top_frequency_decile() {
        let corpus = generate_corpus(8, &small_config()).unwrap();
        let order = frequency_order(&corpus.object_frequency);
        let decile: HashSet<usize> = order
            .iter()
            .take(corpus.config.object_count.div_ceil(10))
            .copied()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for scene in corpus.eval.caption_scenes.iter().take(20) {
            let neg = popular_negative(scene, &corpus.object_frequency, &mut rng);
            assert!(!scene.contains(neg));
            let decile_all_present = decile.iter().all(|s| scene.contains(*s));
            if !decile_all_present {
                assert!(
                    decile.contains(&neg),
                    "negative {neg} not in the top decile {decile:?}"
                );
            }
        }
    }

    #[test]
    fn splits_carry_correct_labels_and_kinds() {
        let corpus = generate_corpus(2, &small_config()).unwrap();
        for (kind, examples) in [
            (SplitKind::Random, &corpus.eval.random),
            (SplitKind::Popular, &corpus.eval.popular),
            (SplitKind::Adversarial, &corpus.eval.adversarial),
            (
                SplitKind::PopularConfusion,
                &corpus.eval.popular_confusion,
            ),
        ] {
            assert_eq!(examples.len(), corpus.config.eval_scenes * 2);
            let mut yes = 0;
            for ex in examples.iter() {
                assert_eq!(ex.split, kind);
                assert_eq!(
                    ex.label == PopeLabel::Yes,
                    ex.scene.contains(ex.query_symbol),
                    "label must reflect presence"
                );
                if ex.label == PopeLabel::Yes {
                    yes += 1;
                }
            }
            assert_eq!(yes * 2, examples.len(), "splits are balanced");
        }
    }

    #[test]
    fn qa_only_corpora_skip_caption_examples() {
        let config = CorpusConfig {
            caption_training: false,
            ..small_config()
        };
        let corpus = generate_corpus(14, &config).unwrap();
        assert_eq!(corpus.training.len(), config.training_scenes * 2);
        for ex in &corpus.training {
            assert_eq!(ex.completion.len(), 2, "every example is a QA pair");
        }
    }

    #[test]
    fn training_examples_follow_the_prompt_grammar() {
        let corpus = generate_corpus(14, &small_config()).unwrap();
        assert_eq!(corpus.training.len(), corpus.config.training_scenes * 3);
        for chunk in corpus.training.chunks(3) {
            let (yes, no, cap) = (&chunk[0], &chunk[1], &chunk[2]);
            assert_eq!(yes.completion, vec![tokens::YES, tokens::EOS]);
            assert!(!yes.grounding.is_empty());
            assert_eq!(no.completion, vec![tokens::NO, tokens::EOS]);
            assert!(no.grounding.is_empty());
            assert_eq!(cap.prompt_text, vec![tokens::LIST]);
            assert_eq!(*cap.completion.last().unwrap(), tokens::EOS);
            let mut listed = cap.completion[..cap.completion.len() - 1].to_vec();
            let sorted = {
                let mut s = listed.clone();
                s.sort_unstable();
                s
            };
            assert_eq!(listed, sorted, "caption lists objects in ascending order");
            listed.dedup();
            assert_eq!(listed.len(), cap.completion.len() - 1, "no duplicates");
            assert!(listed.iter().all(|&t| t >= tokens::FIRST_OBJECT));
        }
    }

    #[test]
    fn qa_train_examples_convert_faithfully() {
        let corpus = generate_corpus(6, &small_config()).unwrap();
        let ex = &corpus.eval.adversarial[0];
        let t = ex.train_example();
        assert_eq!(t.prompt_text[1], object_token(ex.query_symbol));
        assert_eq!(t.completion[0], ex.label_token());
        assert_eq!(t.grounding, ex.scene.region_of(ex.query_symbol));
        assert_eq!(t.patches.shape()[1], corpus.config.patch_width());
    }

    #[test]
    fn confusion_split_pairs_frequent_present_with_rare_absent() {
        let corpus = generate_corpus(9, &small_config()).unwrap();
        for pair in corpus.eval.popular_confusion.chunks(2) {
            let (pos, neg) = (&pair[0], &pair[1]);
            assert_eq!(pos.label, PopeLabel::Yes);
            assert_eq!(neg.label, PopeLabel::No);
            let freq = &corpus.object_frequency;
            for present in pos.scene.object_inventory() {
                assert!(freq[pos.query_symbol] >= freq[present]);
            }
            for absent in absent_symbols(&neg.scene, corpus.config.object_count) {
                assert!(freq[neg.query_symbol] <= freq[absent]);
            }
        }
    }
}
