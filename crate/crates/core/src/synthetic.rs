//! Seeded synthetic fixtures: planted-region images and a hashtag neighbour
//! corpus. Used by tests, the acceptance suite and the CLI's `--synthetic`
//! modes.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Sample};
use crate::error::{read_to_string, write_string, Error, Result};
use crate::hashtags::{
    format_hashtag_file, format_vector_lines, parse_hashtag_file, parse_vector_lines, EmbeddingTable, Hashtag,
    SegDictionary,
};
use crate::masks::{aggregate_masks_complement, Mask, RegionKind, SegmentRegion};
use crate::model::{ModelConfig, TinyConvConfig};
use crate::saliency::ContentSets;
use crate::training::{Augmentation, TrainConfig};

/// Object colours for classes 0 and 1; background tints for classes 2 and 3.
const OBJECT_RGB: [[f64; 3]; 2] = [[0.9, 0.15, 0.1], [0.1, 0.85, 0.2]];
const BACKGROUND_RGB: [[f64; 3]; 2] = [[0.25, 0.3, 0.75], [0.75, 0.65, 0.25]];

pub const PLANTED_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Probability that the background class matches the object class,
    /// which plants a spurious object/context correlation.
    pub correlation: f64,
    pub noise: f64,
    pub object_side: (usize, usize),
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n: 200,
            size: 32,
            seed: 0,
            correlation: 0.8,
            noise: 0.08,
            object_side: (10, 14),
        }
    }
}

/// Four-class set: classes 0/1 are carried only by a coloured square (the
/// object), classes 2/3 only by the background tint (the context). Every
/// image has one object and one context label. Masks use complement mode.
pub fn planted_region_dataset(cfg: &PlantedConfig) -> (Dataset, ContentSets) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.size;
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let obj = rng.gen_range(0..2usize);
        let ctx = if rng.gen_bool(cfg.correlation) { obj } else { 1 - obj };
        let side = rng.gen_range(cfg.object_side.0..=cfg.object_side.1).min(s);
        let top = rng.gen_range(0..=s - side);
        let left = rng.gen_range(0..=s - side);
        let inside = |y: usize, x: usize| y >= top && y < top + side && x >= left && x < left + side;
        let image = Array3::from_shape_fn((3, s, s), |(c, y, x)| {
            let base = if inside(y, x) { OBJECT_RGB[obj][c] } else { BACKGROUND_RGB[ctx][c] };
            (base + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0)
        });
        let square = Mask::from_shape_fn((s, s), |(y, x)| inside(y, x));
        let regions = vec![
            SegmentRegion::new(square.mapv(|b| !b), 200 + ctx as u32, RegionKind::Stuff, 1.0),
            SegmentRegion::new(square, 100 + obj as u32, RegionKind::Thing, 0.95),
        ];
        let masks = aggregate_masks_complement((s, s), &regions[1..], 0.6).expect("consistent fixture");
        let mut labels = vec![false; PLANTED_CLASSES];
        labels[obj] = true;
        labels[2 + ctx] = true;
        samples.push(Sample {
            id: format!("planted_{i:04}"),
            image,
            labels,
            regions: Some(regions),
            masks: Some(masks),
            hashtag: None,
        });
    }
    let sets = ContentSets::new([0, 1], [2, 3]).expect("disjoint");
    (Dataset { samples }, sets)
}

/// Two classes decided by the colour of a patch on a grey background.
pub fn separable_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let cfg = PlantedConfig {
        n,
        size,
        seed,
        correlation: 0.5,
        ..Default::default()
    };
    let (mut data, _) = planted_region_dataset(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E9A);
    for s in &mut data.samples {
        let obj = if s.labels[0] { 0 } else { 1 };
        let mask_o = s.masks.as_ref().expect("fixture has masks").mask_o.clone();
        for ((_, y, x), v) in s.image.indexed_iter_mut() {
            if !mask_o[[y, x]] {
                *v = 0.5 + rng.gen_range(-0.08..=0.08);
            }
        }
        s.labels = vec![obj == 0, obj == 1];
        s.id = s.id.replace("planted", "separable");
    }
    data
}

pub fn fixture_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        backbone: TinyConvConfig::default(),
        hashtag_dim: 0,
        input_mean: vec![0.5; 3],
        input_std: vec![0.5; 3],
        ..Default::default()
    }
}

/// Label prior of the planted fixtures: every class is positive in about
/// half of the images.
pub const FIXTURE_PI: f64 = 0.5;

/// Desk-scale schedule for the 32x32 fixtures: small batches, no warmup and
/// flip-only augmentation.
pub fn fixture_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        momentum: 0.9,
        base_lr: 0.005,
        warmup_epochs: 0,
        epochs: 5,
        seed,
        augmentation: Augmentation {
            random_resized_crop: false,
            input_size: 32,
            hflip: true,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Neighbour corpus for the k sweep: posts with image features and
/// concatenated hashtags, plus labelled query images.
#[derive(Debug, Clone)]
pub struct NeighborCorpus {
    pub num_classes: usize,
    /// Database posts: `(id, image feature, hashtags)`.
    pub posts: Vec<(usize, Vec<f64>, Vec<Hashtag>)>,
    /// Query images: `(image feature, class)`.
    pub queries: Vec<(Vec<f64>, usize)>,
    pub dictionary: SegDictionary,
    pub embeddings: EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub posts_per_class: usize,
    pub queries_per_class: usize,
    pub image_dim: usize,
    pub embed_dim: usize,
    /// Spread of image features around their class centroid.
    pub image_noise: f64,
    /// Probability that a post's hashtag is off-topic noise.
    pub tag_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_classes: 5,
            posts_per_class: 120,
            queries_per_class: 60,
            image_dim: 16,
            embed_dim: 12,
            image_noise: 1.0,
            tag_noise: 0.95,
            seed: 0,
        }
    }
}

/// Class `c` owns words `w{c}a{j}` / `w{c}b{j}`; its hashtags concatenate
/// one of each. Nearest neighbours in image space share the query's class
/// with a probability that decays with rank, because every class holds
/// only `posts_per_class` posts.
pub fn neighbor_corpus(cfg: &CorpusConfig) -> NeighborCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let centroids: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..cfg.image_dim).map(|_| unit.sample(&mut rng) * 1.2).collect())
        .collect();
    let topics: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..cfg.embed_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let words_per_part = 4;
    let mut dict = Vec::new();
    let mut emb = Vec::new();
    let mut word_vec = |w: String, centre: Option<&Vec<f64>>, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..cfg.embed_dim)
            .map(|d| centre.map_or(0.0, |c| c[d]) + unit.sample(rng) * 0.5)
            .collect();
        dict.push((w.clone(), 1.0));
        emb.push((w, v));
    };
    for (c, topic) in topics.iter().enumerate() {
        for j in 0..words_per_part {
            word_vec(format!("w{c}a{j}"), Some(topic), &mut rng);
            word_vec(format!("w{c}b{j}"), Some(topic), &mut rng);
        }
    }
    let noise_words = 12;
    for j in 0..noise_words {
        word_vec(format!("noise{j}"), None, &mut rng);
    }
    let dictionary = SegDictionary::new(dict).expect("valid dictionary");
    let embeddings = EmbeddingTable::new(cfg.embed_dim, emb).expect("valid table");
    let feature = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        centroids[c].iter().map(|m| m + unit.sample(rng) * cfg.image_noise).collect()
    };
    let mut posts = Vec::new();
    for c in 0..cfg.num_classes {
        for _ in 0..cfg.posts_per_class {
            let tags = (0..3)
                .map(|_| {
                    let raw = if rng.gen_bool(cfg.tag_noise) {
                        format!("noise{}noise{}", rng.gen_range(0..noise_words), rng.gen_range(0..noise_words))
                    } else {
                        format!("w{c}a{}w{c}b{}", rng.gen_range(0..words_per_part), rng.gen_range(0..words_per_part))
                    };
                    Hashtag::new(&raw).expect("alphanumeric")
                })
                .collect();
            posts.push((posts.len(), feature(c, &mut rng), tags));
        }
    }
    let mut queries = Vec::new();
    for c in 0..cfg.num_classes {
        for _ in 0..cfg.queries_per_class {
            queries.push((feature(c, &mut rng), c));
        }
    }
    NeighborCorpus {
        num_classes: cfg.num_classes,
        posts,
        queries,
        dictionary,
        embeddings,
    }
}

/// File names of an on-disk neighbour corpus.
pub const CORPUS_FILES: [&str; 6] = [
    "dictionary.txt",
    "embeddings.vec",
    "posts.vec",
    "posts.tags",
    "queries.vec",
    "queries.labels",
];

impl NeighborCorpus {
    /// Writes the six corpus files. Post and query ids are decimal row
    /// numbers; labels are `query_id<TAB>class` lines.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let [dict, emb, posts, tags, queries, labels] = CORPUS_FILES.map(|f| dir.join(f));
        write_string(&dict, &self.dictionary.to_text())?;
        write_string(&emb, &self.embeddings.to_text())?;
        let ids: Vec<String> = self.posts.iter().map(|p| p.0.to_string()).collect();
        write_string(
            &posts,
            &format_vector_lines(ids.iter().zip(&self.posts).map(|(id, p)| (id.as_str(), p.1.as_slice()))),
        )?;
        let tag_rows: Vec<(String, Vec<Hashtag>)> = self.posts.iter().map(|p| (p.0.to_string(), p.2.clone())).collect();
        write_string(&tags, &format_hashtag_file(&tag_rows))?;
        let qids: Vec<String> = (0..self.queries.len()).map(|i| i.to_string()).collect();
        write_string(
            &queries,
            &format_vector_lines(qids.iter().zip(&self.queries).map(|(id, q)| (id.as_str(), q.0.as_slice()))),
        )?;
        let label_text: String = self.queries.iter().enumerate().map(|(i, q)| format!("{i}\t{}\n", q.1)).collect();
        write_string(&labels, &label_text)
    }

    /// Reads a corpus written by [`NeighborCorpus::save_dir`] (or assembled
    /// by hand in the same format). `num_classes` is one past the largest
    /// query label.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let [dict, emb, posts, tags, queries, labels] = CORPUS_FILES.map(|f| dir.join(f));
        let dictionary = SegDictionary::load(&dict)?;
        let embeddings = EmbeddingTable::load(&emb)?;
        let parse_id = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(what.to_string(), format!("id {s:?} is not a non-negative integer")))
        };
        let mut tag_map: HashMap<usize, Vec<Hashtag>> = HashMap::new();
        for (id, t) in parse_hashtag_file(&read_to_string(&tags)?)? {
            tag_map.insert(parse_id(&id, "posts.tags")?, t);
        }
        let mut post_rows = Vec::new();
        for (id, v) in parse_vector_lines(&read_to_string(&posts)?, "posts.vec")? {
            let id = parse_id(&id, "posts.vec")?;
            post_rows.push((id, v, tag_map.remove(&id).unwrap_or_default()));
        }
        if let Some(id) = tag_map.keys().min() {
            return Err(Error::Input(format!("hashtags given for unknown post {id}")));
        }
        let mut label_map: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in read_to_string(&labels)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ctx = || format!("queries.labels line {}", lineno + 1);
            let (id, class) = line.split_once('\t').ok_or_else(|| Error::parse(ctx(), "expected `id<TAB>class`"))?;
            let class = class.trim().parse::<usize>().map_err(|e| Error::parse(ctx(), e))?;
            label_map.insert(id.to_string(), class);
        }
        let mut query_rows = Vec::new();
        for (id, v) in parse_vector_lines(&read_to_string(&queries)?, "queries.vec")? {
            let class = label_map
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Input(format!("query {id} has no label")))?;
            query_rows.push((v, class));
        }
        let num_classes = query_rows.iter().map(|q| q.1 + 1).max().unwrap_or(0);
        if post_rows.is_empty() || query_rows.is_empty() {
            return Err(Error::Input("neighbour corpus needs posts and queries".into()));
        }
        if post_rows[0].1.len() != query_rows[0].0.len() {
            return Err(Error::Input("post and query feature dimensions differ".into()));
        }
        Ok(NeighborCorpus {
            num_classes,
            posts: post_rows,
            queries: query_rows,
            dictionary,
            embeddings,
        })
    }

    pub fn tags_by_id(&self) -> HashMap<usize, Vec<Hashtag>> {
        self.posts.iter().map(|(id, _, t)| (*id, t.clone())).collect()
    }

    pub fn query_labels(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.queries.len(), self.num_classes), |(i, c)| self.queries[i].1 == c)
    }
}
