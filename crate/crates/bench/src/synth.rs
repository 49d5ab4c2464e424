//! Synthetic relational video scenes, question templates and the brute-force
//! oracles that answer them.
//!
//! A scene holds `K` objects over `T` frames. Each frame is a short clip of
//! `substeps` motion steps; an object's box in frame `t` is its position at
//! the start of that clip. Relational answers depend only on relative
//! geometry: every scene is shifted by a random global offset.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use krst_core::config::Head;
use krst_core::encoder::{box_row, ObjectFeatureBank};
use krst_core::tensor::Tensor;
use krst_core::{Error, Result};

use krst_core::config::Stream;

pub const CATEGORIES: [&str; 8] = ["cube", "ball", "cone", "ring", "star", "disk", "bar", "cup"];

/// Side of every object box.
const BOX_SIDE: f64 = 0.08;
/// Horizontal distance covered by one motion step of speed 1.
const STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FrameRelpos,
    Transition,
    ActionCount,
    MultichoiceRelation,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::FrameRelpos, Task::Transition, Task::ActionCount, Task::MultichoiceRelation];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::FrameRelpos => "frame_relpos",
            Task::Transition => "transition",
            Task::ActionCount => "action_count",
            Task::MultichoiceRelation => "multichoice_relation",
        }
    }

    pub fn head(self, params: &SceneParams) -> Head {
        match self {
            Task::FrameRelpos => Head::OpenEnded { classes: params.categories },
            Task::Transition | Task::MultichoiceRelation => Head::Multichoice { candidates: params.candidates },
            Task::ActionCount => Head::Count { lo: 1, hi: params.max_count as i64 },
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Above, Direction::Below];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }

    /// Signed distance from `anchor` to `other` along the direction;
    /// positive when `other` lies that way. `y` grows downwards.
    fn offset(self, anchor: [f64; 2], other: [f64; 2]) -> f64 {
        match self {
            Direction::Left => anchor[0] - other[0],
            Direction::Right => other[0] - anchor[0],
            Direction::Above => anchor[1] - other[1],
            Direction::Below => other[1] - anchor[1],
        }
    }
}

/// Scene and realization parameters shared by every sample of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub t: usize,
    pub k: usize,
    /// Motion steps per frame.
    pub substeps: usize,
    /// Number of object categories in use (at most 8).
    pub categories: usize,
    /// Multichoice candidate count.
    pub candidates: usize,
    /// Largest repetition count of the action task; the smallest is 1.
    pub max_count: usize,
    /// Minimum center separation along both axes, so relations never tie.
    pub min_gap: f64,
    /// Expected norm of the category and motion codes.
    pub code_norm: f64,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Width of the video and object features.
    pub c: usize,
    pub c_s: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            t: 4,
            k: 4,
            substeps: 4,
            categories: 8,
            candidates: 5,
            max_count: 6,
            min_gap: 0.05,
            code_norm: 1.0,
            noise: 0.02,
            c: 64,
            c_s: 64,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.substeps == 0 {
            return fail(format!("need T, substeps >= 1, got {} and {}", self.t, self.substeps));
        }
        if self.k < 2 {
            return fail(format!("relational scenes need K >= 2 objects, got {}", self.k));
        }
        if self.categories > CATEGORIES.len() || self.categories <= self.k {
            return fail(format!("categories must lie in ({}, {}], got {}", self.k, CATEGORIES.len(), self.categories));
        }
        if self.candidates < 2 || self.candidates > self.categories {
            return fail(format!("candidates must lie in [2, {}], got {}", self.categories, self.candidates));
        }
        let steps = self.t * self.substeps;
        if self.max_count == 0 || 2 * self.max_count - 1 > steps {
            return fail(format!("max_count must lie in [1, {}], got {}", steps.div_ceil(2), self.max_count));
        }
        // Centers live in a square of side 0.6 and need distinct coordinates.
        if !(self.min_gap >= 0.0 && self.min_gap * (self.k as f64 - 1.0) < 0.6) {
            return fail(format!("min_gap {} leaves no room for {} objects", self.min_gap, self.k));
        }
        if !(self.code_norm.is_finite() && self.code_norm > 0.0) {
            return fail(format!("code_norm must be positive, got {}", self.code_norm));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if self.c == 0 || self.c_s == 0 {
            return fail("feature widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Category id in every frame.
    pub category: Vec<usize>,
    /// Box center at the start of every frame.
    pub center: Vec<[f64; 2]>,
    /// Velocity of every motion step, `T * substeps` entries.
    pub motion: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub t: usize,
    pub substeps: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Same scene shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Scene {
        let mut s = self.clone();
        for o in &mut s.objects {
            for c in &mut o.center {
                c[0] += dx;
                c[1] += dy;
            }
        }
        s
    }

    fn find(&self, category: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.category[0] == category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Question {
    /// "what is <dir> of the <anchor>": the nearest object strictly on that
    /// side of the anchor, measured along the direction's axis.
    Relation { direction: Direction, anchor: usize },
    /// "what does the <from> become": the last-frame category of the object
    /// that starts as `from`.
    Transition { from: usize },
    /// "how many times does the <actor> hop": the number of maximal runs of
    /// rightward motion steps.
    Count { actor: usize },
}

impl Question {
    pub fn words(&self) -> Vec<&'static str> {
        match *self {
            Question::Relation { direction, anchor } => {
                vec!["what", "is", direction.word(), "of", "the", CATEGORIES[anchor]]
            }
            Question::Transition { from } => vec!["what", "does", "the", CATEGORIES[from], "become"],
            Question::Count { actor } => vec!["how", "many", "times", "does", "the", CATEGORIES[actor], "hop"],
        }
    }
}

/// Template words followed by the category names.
pub fn vocabulary() -> Vec<String> {
    let words = ["what", "is", "of", "the", "does", "become", "how", "many", "times", "hop", "left", "right", "above", "below"];
    words.iter().chain(CATEGORIES.iter()).map(|w| w.to_string()).collect()
}

/// Oracle answer: a category id, or a count for [`Question::Count`].
pub fn oracle(scene: &Scene, q: &Question) -> Option<usize> {
    match *q {
        Question::Relation { direction, anchor } => relation_oracle(scene, direction, anchor),
        Question::Transition { from } => scene.find(from).map(|o| *o.category.last().expect("T >= 1")),
        Question::Count { actor } => scene.find(actor).map(|o| count_runs(&o.motion)),
    }
}

/// Answer of a relation question in the first frame.
pub fn relation_oracle(scene: &Scene, direction: Direction, anchor: usize) -> Option<usize> {
    let a = scene.find(anchor)?.center[0];
    scene
        .objects
        .iter()
        .filter(|o| o.category[0] != anchor)
        .map(|o| (direction.offset(a, o.center[0]), o.category[0]))
        .filter(|(d, _)| *d > 0.0)
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, c)| c)
}

/// Number of maximal runs of steps with positive horizontal velocity.
pub fn count_runs(motion: &[[f64; 2]]) -> usize {
    let mut runs = 0;
    let mut inside = false;
    for v in motion {
        let moving = v[0] > 0.0;
        if moving && !inside {
            runs += 1;
        }
        inside = moving;
    }
    runs
}

/// One generated question with its answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub scene: Scene,
    pub question: Question,
    /// Candidate categories for multichoice tasks.
    pub candidates: Option<Vec<usize>>,
    /// Category id, candidate index or count, depending on the task.
    pub answer: usize,
}

fn distinct_categories(params: &SceneParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..params.categories).collect();
    all.shuffle(rng);
    all.truncate(params.k);
    all
}

/// `n` coordinates in `[0.05, 0.65]` pairwise at least `gap` apart.
fn spread(n: usize, gap: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.65)).collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] >= gap) {
            v.shuffle(rng);
            return v;
        }
    }
}

/// Static scene: every object keeps its category and position.
fn static_scene(params: &SceneParams, rng: &mut ChaCha8Rng) -> Scene {
    let cats = distinct_categories(params, rng);
    let xs = spread(params.k, params.min_gap, rng);
    let ys = spread(params.k, params.min_gap, rng);
    let objects = (0..params.k)
        .map(|i| SceneObject {
            category: vec![cats[i]; params.t],
            center: vec![[xs[i], ys[i]]; params.t],
            motion: vec![[0.0, 0.0]; params.t * params.substeps],
        })
        .collect();
    Scene { t: params.t, substeps: params.substeps, objects }
}

/// Horizontal velocities over `len` steps with exactly `runs` maximal runs of
/// positive steps.
fn motion_with_runs(len: usize, runs: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    // Bins: leading gap, then (run, gap) pairs; inner gaps need one step.
    let bins = 2 * runs + 1;
    let mut lengths = vec![0usize; bins];
    for (b, l) in lengths.iter_mut().enumerate() {
        let inner_gap = b % 2 == 0 && b != 0 && b != bins - 1;
        if b % 2 == 1 || inner_gap {
            *l = 1;
        }
    }
    for _ in 0..len - lengths.iter().sum::<usize>() {
        lengths[rng.random_range(0..bins)] += 1;
    }
    let mut out = Vec::with_capacity(len);
    for (b, &l) in lengths.iter().enumerate() {
        for _ in 0..l {
            let vx = if b % 2 == 1 { 1.0 } else { -f64::from(rng.random_range(0..2u8)) };
            out.push([vx, 0.0]);
        }
    }
    out
}

/// Moves every object along its motion, one frame per `substeps` steps.
fn apply_motion(scene: &mut Scene) {
    let s = scene.substeps;
    for o in &mut scene.objects {
        for t in 1..scene.t {
            let mut c = o.center[t - 1];
            for v in &o.motion[(t - 1) * s..t * s] {
                c[0] += STEP * v[0];
                c[1] += STEP * v[1];
            }
            o.center[t] = c;
        }
    }
}

/// Candidate list holding `answer` plus distractors, scene categories first;
/// returns the list and the answer's position in it.
fn candidates_for(answer: usize, scene_cats: &[usize], params: &SceneParams, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let mut pool: Vec<usize> = scene_cats.iter().copied().filter(|&c| c != answer).collect();
    pool.shuffle(rng);
    let mut rest: Vec<usize> = (0..params.categories).filter(|c| *c != answer && !pool.contains(c)).collect();
    rest.shuffle(rng);
    pool.extend(rest);
    pool.truncate(params.candidates - 1);
    pool.push(answer);
    pool.shuffle(rng);
    let at = pool.iter().position(|&c| c == answer).expect("answer inserted");
    (pool, at)
}

/// Draws one scene and question for `task`, before the global offset.
fn draw(task: Task, params: &SceneParams, rng: &mut ChaCha8Rng) -> Generated {
    match task {
        Task::FrameRelpos | Task::MultichoiceRelation => {
            let scene = static_scene(params, rng);
            let direction = *Direction::ALL.choose(rng).expect("non-empty");
            let anchors: Vec<usize> =
                scene.objects.iter().map(|o| o.category[0]).filter(|&a| relation_oracle(&scene, direction, a).is_some()).collect();
            let anchor = *anchors.choose(rng).expect("only the extreme object lacks a neighbor that way");
            let question = Question::Relation { direction, anchor };
            let answer = oracle(&scene, &question).expect("anchor chosen to have one");
            if task == Task::FrameRelpos {
                return Generated { scene, question, candidates: None, answer };
            }
            let cats: Vec<usize> = scene.objects.iter().map(|o| o.category[0]).collect();
            let (candidates, at) = candidates_for(answer, &cats, params, rng);
            Generated { scene, question, candidates: Some(candidates), answer: at }
        }
        Task::Transition => {
            let mut scene = static_scene(params, rng);
            let cats: Vec<usize> = scene.objects.iter().map(|o| o.category[0]).collect();
            let unused: Vec<usize> = (0..params.categories).filter(|c| !cats.contains(c)).collect();
            let to = *unused.choose(rng).expect("categories > K");
            let who = rng.random_range(0..params.k);
            let at = if params.t > 1 { rng.random_range(1..params.t) } else { 0 };
            let from = cats[who];
            for c in &mut scene.objects[who].category[at..] {
                *c = to;
            }
            let question = Question::Transition { from };
            let answer = oracle(&scene, &question).expect("object exists");
            let others: Vec<usize> = cats.iter().copied().filter(|&c| c != from).collect();
            let (candidates, at) = candidates_for(answer, &others, params, rng);
            Generated { scene, question, candidates: Some(candidates), answer: at }
        }
        Task::ActionCount => {
            let mut scene = static_scene(params, rng);
            let len = params.t * params.substeps;
            for o in &mut scene.objects {
                o.motion = (0..len).map(|_| [f64::from(rng.random_range(-1..=1i8)), 0.0]).collect();
            }
            let who = rng.random_range(0..params.k);
            let runs = rng.random_range(1..=params.max_count);
            scene.objects[who].motion = motion_with_runs(len, runs, rng);
            apply_motion(&mut scene);
            let question = Question::Count { actor: scene.objects[who].category[0] };
            let answer = oracle(&scene, &question).expect("actor exists");
            Generated { scene, question, candidates: None, answer }
        }
    }
}

/// One sample of `task`: a scene shifted by a random global offset, with
/// its question and oracle answer.
pub fn generate(task: Task, params: &SceneParams, rng: &mut ChaCha8Rng) -> Generated {
    let mut g = draw(task, params, rng);
    let (dx, dy) = (rng.random_range(0.0..0.3), rng.random_range(0.0..0.3));
    g.scene = g.scene.translated(dx, dy);
    g
}

/// Fixed random codes that turn scene attributes into feature vectors.
#[derive(Debug, Clone)]
pub struct Palette {
    /// Object appearance code per category (`C_s` wide).
    category: Vec<Vec<f64>>,
    /// Frame appearance code per category (`C` wide).
    category_video: Vec<Vec<f64>>,
    /// Object motion code per (step, axis) (`C_s` wide).
    motion: Vec<Vec<f64>>,
    motion_video: Vec<Vec<f64>>,
}

impl Palette {
    pub fn new(params: &SceneParams, rng: &mut ChaCha8Rng) -> Self {
        // Entries from U(-a, a) with a = norm * sqrt(3 / width) give codes
        // of expected squared norm `norm²`.
        let norm = params.code_norm;
        let mut codes = |n: usize, width: usize| -> Vec<Vec<f64>> {
            let a = norm * (3.0 / width as f64).sqrt();
            (0..n).map(|_| (0..width).map(|_| rng.random_range(-a..a)).collect()).collect()
        };
        let steps = 2 * params.substeps;
        Self {
            category: codes(CATEGORIES.len(), params.c_s),
            category_video: codes(CATEGORIES.len(), params.c),
            motion: codes(steps, params.c_s),
            motion_video: codes(steps, params.c),
        }
    }
}

/// Appearance and motion feature banks of `scene`, a deterministic function
/// of the scene, the palette and the noise stream.
pub fn realize(scene: &Scene, palette: &Palette, params: &SceneParams, noise: &mut ChaCha8Rng) -> Result<[ObjectFeatureBank; 2]> {
    let (t, k, s) = (scene.t, scene.objects.len(), scene.substeps);
    let mut gauss = |v: f64| -> f64 {
        let z: f64 = StandardNormal.sample(noise);
        v + params.noise * z
    };

    let mut boxes = Vec::with_capacity(t * k * 6);
    for f in 0..t {
        for o in &scene.objects {
            let [x, y] = o.center[f];
            let h = BOX_SIDE / 2.0;
            boxes.extend(box_row(x - h, y - h, x + h, y + h));
        }
    }
    let boxes = Tensor::matrix(t * k, 6, boxes)?;

    let motion_code = |codes: &[Vec<f64>], o: &SceneObject, f: usize, width: usize| -> Vec<f64> {
        let mut out = vec![0.0; width];
        for (j, v) in o.motion[f * s..(f + 1) * s].iter().enumerate() {
            for (a, &speed) in v.iter().enumerate() {
                for (x, c) in out.iter_mut().zip(&codes[2 * j + a]) {
                    *x += speed * c;
                }
            }
        }
        out
    };

    let mut banks = Vec::with_capacity(2);
    for stream in [Stream::Appearance, Stream::Motion] {
        let mut semantic = Vec::with_capacity(t * k * params.c_s);
        let mut video = Vec::with_capacity(t * params.c);
        for f in 0..t {
            let mut frame = vec![0.0; params.c];
            for o in &scene.objects {
                let (obj, vid) = match stream {
                    Stream::Appearance => (palette.category[o.category[f]].clone(), palette.category_video[o.category[f]].clone()),
                    Stream::Motion => (motion_code(&palette.motion, o, f, params.c_s), motion_code(&palette.motion_video, o, f, params.c)),
                };
                semantic.extend(obj.into_iter().map(&mut gauss));
                for (x, v) in frame.iter_mut().zip(vid) {
                    *x += v / k as f64;
                }
            }
            video.extend(frame.into_iter().map(&mut gauss));
        }
        banks.push(ObjectFeatureBank::new(
            stream,
            t,
            k,
            Tensor::matrix(t, params.c, video)?,
            Tensor::matrix(t * k, params.c_s, semantic)?,
            boxes.clone(),
        )?);
    }
    let motion = banks.pop().expect("two streams");
    let appearance = banks.pop().expect("two streams");
    Ok([appearance, motion])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn obj(cat: usize, x: f64, y: f64) -> SceneObject {
        SceneObject { category: vec![cat], center: vec![[x, y]], motion: vec![[0.0, 0.0]] }
    }

    #[test]
    fn left_of_b_is_a() {
        let scene = Scene { t: 1, substeps: 1, objects: vec![obj(0, 0.2, 0.5), obj(1, 0.7, 0.5)] };
        assert_eq!(relation_oracle(&scene, Direction::Left, 1), Some(0));
        assert_eq!(relation_oracle(&scene, Direction::Right, 0), Some(1));
        assert_eq!(relation_oracle(&scene, Direction::Left, 0), None);
    }

    #[test]
    fn nearest_on_the_side_wins() {
        let scene = Scene { t: 1, substeps: 1, objects: vec![obj(0, 0.1, 0.1), obj(1, 0.4, 0.9), obj(2, 0.8, 0.5)] };
        assert_eq!(relation_oracle(&scene, Direction::Left, 2), Some(1));
        assert_eq!(relation_oracle(&scene, Direction::Above, 2), Some(0));
        assert_eq!(relation_oracle(&scene, Direction::Below, 2), Some(1));
    }

    #[test]
    fn three_hops_count_three() {
        let m: Vec<[f64; 2]> = [0., 1., 1., -1., 1., 0., 0., 1.].iter().map(|&v| [v, 0.0]).collect();
        assert_eq!(count_runs(&m), 3);
        assert_eq!(count_runs(&[[1.0, 0.0]; 4]), 1);
        assert_eq!(count_runs(&[[-1.0, 0.0]; 4]), 0);
    }

    #[test]
    fn constructed_motion_has_requested_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for runs in 1..=8 {
            for _ in 0..20 {
                let m = motion_with_runs(16, runs, &mut rng);
                assert_eq!(m.len(), 16);
                assert_eq!(count_runs(&m), runs);
            }
        }
    }

    #[test]
    fn generated_answers_match_oracle() {
        let params = SceneParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for task in Task::ALL {
            for _ in 0..50 {
                let g = generate(task, &params, &mut rng);
                let truth = oracle(&g.scene, &g.question).unwrap();
                match &g.candidates {
                    Some(c) => {
                        assert_eq!(c.len(), params.candidates);
                        assert_eq!(c[g.answer], truth);
                        let mut d = c.clone();
                        d.sort();
                        d.dedup();
                        assert_eq!(d.len(), c.len());
                    }
                    None => assert_eq!(g.answer, truth),
                }
            }
        }
    }

    #[test]
    fn count_answers_stay_in_range() {
        let params = SceneParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let g = generate(Task::ActionCount, &params, &mut rng);
            assert!((1..=params.max_count).contains(&g.answer));
        }
    }

    #[test]
    fn realization_is_deterministic_and_valid() {
        let params = SceneParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let palette = Palette::new(&params, &mut rng);
        let g = generate(Task::ActionCount, &params, &mut rng);
        let a = realize(&g.scene, &palette, &params, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = realize(&g.scene, &palette, &params, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].boxes, a[1].boxes);
        assert_eq!((a[1].t, a[1].k), (params.t, params.k));
    }

    #[test]
    fn bad_params_are_config_errors() {
        let bad = [
            SceneParams { k: 1, ..Default::default() },
            SceneParams { categories: 4, ..Default::default() },
            SceneParams { candidates: 9, ..Default::default() },
            SceneParams { max_count: 9, ..Default::default() },
            SceneParams { noise: f64::NAN, ..Default::default() },
        ];
        for p in bad {
            assert!(matches!(p.validate(), Err(Error::Config(_))), "{p:?}");
        }
        SceneParams::default().validate().unwrap();
    }
}
