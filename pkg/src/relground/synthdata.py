"""Synthetic paired-domain dataset generator.

Produces two referring-expression corpora ("source" and "target") over
procedurally built scenes. The domains differ along three axes: object
feature distribution (rotation + offset + noise of shared category
prototypes), bounding-box annotation bias (per-domain grow/shift), and
text (per-concept synonym words plus a different template mix). Category
names on scene objects are domain-neutral concept strings; only the
expression/triplet words vary between domains.

Every expression is solvable: :func:`solve_sample` recovers the target
object from tokens plus ground-truth scene state, and the generator
rejects ambiguous candidates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

SCHEMA_VERSION = 1

SIZE_CONCEPTS = ("big", "small")
POSITION_CONCEPTS = ("left", "right", "top", "bottom", "middle")
SPATIAL_RELATIONS = ("left-of", "above", "near")
SEMANTIC_RELATIONS = ("holding", "on", "facing")

# concept -> (base word, source-only synonym, target-only synonym)
LEXICON = {
    "table": ("table", "counter", "desk"),
    "chair": ("chair", "seat", "stool"),
    "lamp": ("lamp", "light", "lantern"),
    "dog": ("dog", "pup", "hound"),
    "cat": ("cat", "tabby", "kitty"),
    "car": ("car", "sedan", "auto"),
    "tree": ("tree", "oak", "pine"),
    "ball": ("ball", "orb", "sphere"),
    "book": ("book", "novel", "tome"),
    "cup": ("cup", "glass", "mug"),
    "box": ("box", "carton", "crate"),
    "bird": ("bird", "sparrow", "finch"),
    "big": ("big", "huge", "large"),
    "small": ("small", "little", "tiny"),
    "left": ("left", "leftward", "leftmost"),
    "right": ("right", "rightward", "rightmost"),
    "top": ("top", "topmost", "upper"),
    "bottom": ("bottom", "bottommost", "lower"),
    "middle": ("middle", "center", "central"),
    "left-of": ("left-of", "lefthand-of", "west-of"),
    "above": ("above", "higher-than", "over"),
    "near": ("near", "close-to", "beside"),
    "holding": ("holding", "gripping", "grasping"),
    "on": ("on", "upon", "atop"),
    "facing": ("facing", "fronting", "toward"),
}

CATEGORY_CONCEPTS = tuple(k for k in LEXICON if k not in SIZE_CONCEPTS
                          and k not in POSITION_CONCEPTS
                          and k not in SPATIAL_RELATIONS
                          and k not in SEMANTIC_RELATIONS)

TEMPLATE_TYPES = ("name", "attribute", "location", "relation")


class GenerationError(RuntimeError):
    """Raised when an expression cannot be realized within the attempt cap."""


class InsufficientDataError(ValueError):
    """Raised when a dataset is too small for a requested split."""


@dataclass
class SceneObject:
    id: int
    category: str                  # domain-neutral concept name
    box: tuple[float, float, float, float]   # (x_tl, y_tl, x_br, y_br) px
    feature: np.ndarray            # (d_obj,) float64

    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass
class Scene:
    id: int
    W_img: float
    H_img: float
    objects: list[SceneObject]
    triplets: list[tuple[int, str, int]]   # (subject_id, relation_word, object_id)

    def object_by_id(self, oid: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(f"object {oid} not in scene {self.id}")


@dataclass
class ReferringSample:
    scene_id: int
    target_object_id: int
    tokens: list[str]
    domain: str                    # "source" or "target"


@dataclass
class DomainSpec:
    """All knobs of one synthetic domain.

    ``synonyms`` maps each concept to the words this domain can realize it
    with (first entry is the primary word); ``variant_usage`` is the
    probability of picking a non-primary word. A concept whose realized
    word sets differ between the paired domains induces private
    vocabulary; identical words are shared.
    """

    domain: str
    categories: tuple[str, ...]
    synonyms: dict[str, tuple[str, ...]]
    semantic_pairs: dict[tuple[str, str], str]
    template_mix: dict[str, float]
    n_scenes: int
    n_expressions: int
    feature_rotation_deg: float
    feature_offset: tuple[float, ...]
    noise_scale: float
    box_grow: float = 0.0          # annotation bias: px added on each side
    box_shift: tuple[float, float] = (0.0, 0.0)
    variant_usage: float = 0.5
    lexicon_seed: int = 0          # shared by both domains of a pair
    d_obj: int = 32
    canvas: float = 256.0
    objects_per_scene: tuple[int, int] = (4, 8)
    object_size: tuple[float, float] = (16.0, 96.0)
    triplets_per_scene: tuple[int, int] = (2, 6)

    def validate(self) -> None:
        total = sum(self.template_mix.get(t, 0.0) for t in TEMPLATE_TYPES)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"template mix must sum to 1, got {total}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be source|target, got {self.domain!r}")
        for concept in self.categories:
            if concept not in self.synonyms:
                raise ValueError(f"category {concept!r} missing from synonym table")

    def vocabulary(self) -> set[str]:
        vocab = {"the"}
        for words in self.synonyms.values():
            vocab.update(words)
        return vocab

    def word_to_concept(self) -> dict[str, str]:
        mapping = {"the": "the"}
        for concept, words in self.synonyms.items():
            for word in words:
                mapping[word] = concept
        return mapping


@dataclass
class Dataset:
    domain: str
    scenes: list[Scene]
    samples: list[ReferringSample]
    vocabulary: set[str]
    word2concept: dict[str, str] | None = None
    categories: tuple[str, ...] = ()
    _scene_index: dict[int, Scene] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._scene_index = {s.id: s for s in self.scenes}

    def scene(self, scene_id: int) -> Scene:
        return self._scene_index[scene_id]

    def __len__(self) -> int:
        return len(self.samples)

    def with_samples(self, samples: list[ReferringSample]) -> "Dataset":
        return Dataset(self.domain, self.scenes, samples, self.vocabulary,
                       self.word2concept, self.categories)

    def token_set(self) -> set[str]:
        tokens: set[str] = set()
        for s in self.samples:
            tokens.update(s.tokens)
        return tokens

    def chance_level(self) -> float:
        """Expected accuracy of uniform random guessing over candidates."""
        if not self.samples:
            return 0.0
        return float(np.mean([1.0 / len(self.scene(s.scene_id).objects) for s in self.samples]))


def rotation_matrix(dim: int, angle_deg: float) -> np.ndarray:
    """Block-diagonal Givens rotation over consecutive coordinate pairs."""
    theta = math.radians(angle_deg)
    mat = np.eye(dim)
    c, s = math.cos(theta), math.sin(theta)
    for k in range(0, dim - 1, 2):
        mat[k, k] = c
        mat[k, k + 1] = -s
        mat[k + 1, k] = s
        mat[k + 1, k + 1] = c
    return mat


def category_prototypes(spec: DomainSpec) -> dict[str, np.ndarray]:
    """Shared per-concept feature prototypes, fixed by the pair's lexicon seed."""
    rng = np.random.default_rng(spec.lexicon_seed)
    protos = {}
    for concept in sorted(CATEGORY_CONCEPTS):
        protos[concept] = rng.normal(0.0, 1.0, size=spec.d_obj)
    return protos


def _pick_word(concept: str, spec: DomainSpec, rng: np.random.Generator) -> str:
    words = spec.synonyms[concept]
    if len(words) > 1 and rng.random() < spec.variant_usage:
        return str(words[1 + rng.integers(0, len(words) - 1)])
    return str(words[0])


def _candidate_triplets(scene: Scene, spec: DomainSpec) -> list[tuple[int, str, int]]:
    """Relation instances (concept-level) supported by scene geometry."""
    cands = []
    objs = scene.objects
    margin = 0.1 * spec.canvas
    near_dist = 0.35 * spec.canvas
    sem_dist = 0.55 * spec.canvas
    for i, a in enumerate(objs):
        for j, b in enumerate(objs):
            if i == j:
                continue
            ax, ay = a.center()
            bx, by = b.center()
            dist = math.hypot(ax - bx, ay - by)
            if ax < bx - margin:
                cands.append((a.id, "left-of", b.id))
            if ay < by - margin:
                cands.append((a.id, "above", b.id))
            if i < j and dist < near_dist:
                cands.append((a.id, "near", b.id))
            if i < j and dist < sem_dist:
                key = tuple(sorted((a.category, b.category)))
                rel = spec.semantic_pairs.get(key)
                if rel is not None:
                    subj, obj = (a, b) if (a.category, b.category) == key or a.category == b.category else (b, a)
                    cands.append((subj.id, rel, obj.id))
    return cands


def _generate_scene(scene_id: int, spec: DomainSpec,
                    protos: dict[str, np.ndarray], rng: np.random.Generator) -> Scene:
    lo, hi = spec.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    rot = rotation_matrix(spec.d_obj, spec.feature_rotation_deg)
    offset = np.asarray(spec.feature_offset, dtype=np.float64)
    smin, smax = spec.object_size
    W = H = spec.canvas
    objects = []
    for oid in range(n_obj):
        concept = str(rng.choice(spec.categories))
        w = float(rng.uniform(smin, smax))
        h = float(rng.uniform(smin, smax))
        cx = float(rng.uniform(0.0, W))
        cy = float(rng.uniform(0.0, H))
        x0 = cx - w / 2 - spec.box_grow + spec.box_shift[0]
        y0 = cy - h / 2 - spec.box_grow + spec.box_shift[1]
        x1 = cx + w / 2 + spec.box_grow + spec.box_shift[0]
        y1 = cy + h / 2 + spec.box_grow + spec.box_shift[1]
        x0 = min(max(x0, 0.0), W - 2.0)
        y0 = min(max(y0, 0.0), H - 2.0)
        x1 = min(max(x1, x0 + 2.0), W)
        y1 = min(max(y1, y0 + 2.0), H)
        feat = rot @ protos[concept] + offset + spec.noise_scale * rng.normal(size=spec.d_obj)
        objects.append(SceneObject(id=oid, category=concept, box=(x0, y0, x1, y1), feature=feat))
    scene = Scene(id=scene_id, W_img=W, H_img=H, objects=objects, triplets=[])
    cands = _candidate_triplets(scene, spec)
    t_lo, t_hi = spec.triplets_per_scene
    want = int(rng.integers(t_lo, t_hi + 1))
    order = rng.permutation(len(cands))
    picked = [cands[k] for k in order[:min(want, len(cands))]]
    scene.triplets = [(s, _pick_word(rel, spec, rng), o) for (s, rel, o) in picked]
    return scene


# Solvability margins used by the generator (the oracle itself needs only
# strict orderings; margins keep learned models able to succeed).
AREA_MARGIN = 1.25
COORD_MARGIN = 12.0


def _location_key(obj: SceneObject, pos: str, scene: Scene) -> float:
    cx, cy = obj.center()
    if pos == "left":
        return cx
    if pos == "right":
        return -cx
    if pos == "top":
        return cy
    if pos == "bottom":
        return -cy
    if pos == "middle":
        return math.hypot(cx - scene.W_img / 2, cy - scene.H_img / 2)
    raise ValueError(pos)


def solve_sample(scene: Scene, tokens: list[str], word2concept: dict[str, str]) -> int | None:
    """Oracle: recover the referred object from ground-truth scene state.

    Returns the unique referent's id, or None on ambiguity / parse failure.
    """
    if not tokens or tokens[0] != "the":
        return None
    concepts = [word2concept.get(t) for t in tokens]
    if any(c is None for c in concepts):
        return None
    if len(tokens) == 2:
        cat = concepts[1]
        matches = [o for o in scene.objects if o.category == cat]
        return matches[0].id if len(matches) == 1 else None
    if len(tokens) == 3:
        mod, cat = concepts[1], concepts[2]
        matches = [o for o in scene.objects if o.category == cat]
        if not matches:
            return None
        if mod in SIZE_CONCEPTS:
            key = [o.area() for o in matches]
            best = int(np.argmax(key)) if mod == "big" else int(np.argmin(key))
            value = key[best]
            others = [k for i, k in enumerate(key) if i != best]
            if others and any(math.isclose(value, k) for k in others):
                return None
            return matches[best].id
        if mod in POSITION_CONCEPTS:
            key = [_location_key(o, mod, scene) for o in matches]
            best = int(np.argmin(key))
            others = [k for i, k in enumerate(key) if i != best]
            if others and any(math.isclose(key[best], k) for k in others):
                return None
            return matches[best].id
        return None
    if len(tokens) == 5 and tokens[3] == "the":
        cat_s, rel, cat_o = concepts[1], concepts[2], concepts[4]
        matches = []
        for subj_id, rel_word, obj_id in scene.triplets:
            subj = scene.object_by_id(subj_id)
            obj = scene.object_by_id(obj_id)
            if subj.category == cat_s and obj.category == cat_o \
                    and word2concept.get(rel_word) == rel:
                matches.append(subj_id)
        uniq = sorted(set(matches))
        return uniq[0] if len(uniq) == 1 else None
    return None


def _try_realize(scene: Scene, target: SceneObject, template: str,
                 spec: DomainSpec, rng: np.random.Generator) -> list[str] | None:
    cat = target.category
    same_cat = [o for o in scene.objects if o.category == cat]
    if template == "name":
        if len(same_cat) != 1:
            return None
        return ["the", _pick_word(cat, spec, rng)]
    if template == "attribute":
        areas = sorted(o.area() for o in same_cat)
        if target.area() == areas[-1] and (len(areas) == 1 or target.area() >= AREA_MARGIN * areas[-2]):
            size = "big"
        elif target.area() == areas[0] and (len(areas) == 1 or areas[1] >= AREA_MARGIN * target.area()):
            size = "small"
        else:
            return None
        return ["the", _pick_word(size, spec, rng), _pick_word(cat, spec, rng)]
    if template == "location":
        order = rng.permutation(len(POSITION_CONCEPTS))
        for k in order:
            pos = POSITION_CONCEPTS[k]
            keys = [_location_key(o, pos, scene) for o in same_cat]
            tkey = _location_key(target, pos, scene)
            if tkey == min(keys) and all(k - tkey >= COORD_MARGIN for i, k in enumerate(keys) if same_cat[i].id != target.id):
                return ["the", _pick_word(pos, spec, rng), _pick_word(cat, spec, rng)]
        return None
    if template == "relation":
        w2c = spec.word_to_concept()
        own = [(s, w, o) for (s, w, o) in scene.triplets if s == target.id]
        if not own:
            return None
        order = rng.permutation(len(own))
        for k in order:
            _, rel_word, obj_id = own[k]
            rel = w2c[rel_word]
            cat_o = scene.object_by_id(obj_id).category
            subjects = set()
            for (s, w, o) in scene.triplets:
                if w2c[w] == rel and scene.object_by_id(s).category == cat \
                        and scene.object_by_id(o).category == cat_o:
                    subjects.add(s)
            if subjects == {target.id}:
                return ["the", _pick_word(cat, spec, rng), _pick_word(rel, spec, rng),
                        "the", _pick_word(cat_o, spec, rng)]
        return None
    raise ValueError(f"unknown template {template!r}")


def generate_domain(spec: DomainSpec, seed: int) -> Dataset:
    """Generate one domain deterministically from (spec, seed).

    Scene i uses an rng seeded with ``seed ^ i`` so scene generation is
    order-independent; expressions for scene i come from a second stream
    derived the same way.
    """
    spec.validate()
    protos = category_prototypes(spec)
    w2c = spec.word_to_concept()
    mix = np.array([spec.template_mix.get(t, 0.0) for t in TEMPLATE_TYPES])

    scenes = []
    samples = []
    base = spec.n_expressions // spec.n_scenes
    extra = spec.n_expressions % spec.n_scenes
    for i in range(spec.n_scenes):
        scene_rng = np.random.default_rng(seed ^ i)
        scene = _generate_scene(i, spec, protos, scene_rng)
        scenes.append(scene)
        expr_rng = np.random.default_rng((seed ^ i) + 0x9E3779B9)
        quota = base + (1 if i < extra else 0)
        for _ in range(quota):
            tokens = None
            for _attempt in range(100):
                template = str(TEMPLATE_TYPES[expr_rng.choice(len(TEMPLATE_TYPES), p=mix)])
                target = scene.objects[int(expr_rng.integers(0, len(scene.objects)))]
                tokens = _try_realize(scene, target, template, spec, expr_rng)
                if tokens is not None and solve_sample(scene, tokens, w2c) == target.id:
                    break
                tokens = None
            if tokens is None:
                raise GenerationError(
                    f"could not realize an unambiguous expression for scene {i} after 100 attempts")
            samples.append(ReferringSample(scene_id=i, target_object_id=target.id,
                                           tokens=tokens, domain=spec.domain))
    return Dataset(domain=spec.domain, scenes=scenes, samples=samples,
                   vocabulary=spec.vocabulary(), word2concept=w2c,
                   categories=tuple(spec.categories))


def split(dataset: Dataset, fractions: tuple[float, float, float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Partition samples into train/val/test by a seeded shuffle."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    n = len(dataset.samples)
    counts = [int(f * n) for f in fractions]
    counts[0] += n - sum(counts)
    if any(c < 1 for c in counts):
        raise InsufficientDataError(f"insufficient data: {n} samples for fractions {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for c in counts:
        idx = sorted(order[start:start + c])
        out.append(dataset.with_samples([dataset.samples[k] for k in idx]))
        start += c
    return tuple(out)


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ceil(fraction * N) samples, drawn without replacement."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset.samples)
    keep = math.ceil(fraction * n)
    idx = sorted(np.random.default_rng(seed).permutation(n)[:keep])
    return dataset.with_samples([dataset.samples[k] for k in idx])


def save_jsonl(dataset: Dataset, path) -> None:
    """One JSON object per line; line types "scene" and "sample"."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in dataset.scenes:
            rec = {
                "v": SCHEMA_VERSION,
                "type": "scene",
                "id": scene.id,
                "W_img": scene.W_img,
                "H_img": scene.H_img,
                "objects": [
                    {"id": o.id, "category": o.category, "box": list(o.box),
                     "feature": [float(x) for x in o.feature]}
                    for o in scene.objects
                ],
                "triplets": [list(t) for t in scene.triplets],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for sample in dataset.samples:
            rec = {
                "v": SCHEMA_VERSION,
                "type": "sample",
                "scene_id": sample.scene_id,
                "target_object_id": sample.target_object_id,
                "tokens": sample.tokens,
                "domain": sample.domain,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path) -> Dataset:
    """Rebuild a dataset from a JSONL file.

    The planned vocabulary and word-concept map are not stored in the
    file; the loaded vocabulary is the observed token set.
    """
    scenes = []
    samples = []
    domain = "source"
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("v") != SCHEMA_VERSION:
                raise ValueError(f"unsupported dataset schema version {rec.get('v')!r}")
            if rec["type"] == "scene":
                objects = [
                    SceneObject(id=o["id"], category=o["category"], box=tuple(o["box"]),
                                feature=np.asarray(o["feature"], dtype=np.float64))
                    for o in rec["objects"]
                ]
                scenes.append(Scene(id=rec["id"], W_img=rec["W_img"], H_img=rec["H_img"],
                                    objects=objects,
                                    triplets=[tuple(t) for t in rec["triplets"]]))
            elif rec["type"] == "sample":
                domain = rec["domain"]
                samples.append(ReferringSample(scene_id=rec["scene_id"],
                                               target_object_id=rec["target_object_id"],
                                               tokens=list(rec["tokens"]),
                                               domain=rec["domain"]))
            else:
                raise ValueError(f"unknown line type {rec['type']!r}")
    ds = Dataset(domain=domain, scenes=scenes, samples=samples, vocabulary=set())
    ds.vocabulary = ds.token_set()
    return ds


def default_domain_pair(pair_seed: int = 0, *,
                        source_expressions: int = 2000, source_scenes: int = 400,
                        target_expressions: int = 1000, target_scenes: int = 200,
                        target_rotation_deg: float = 30.0, target_offset_scale: float = 0.3,
                        noise_scale: float = 0.08,
                        variant_usage: float = 0.5,
                        n_target_variant_categories: int = 6,
                        n_source_variant_categories: int = 3) -> tuple[DomainSpec, DomainSpec]:
    """Build the default source/target DomainSpec pair.

    The pair shares category prototypes, the semantic-relation table, and
    a base lexicon; a seeded choice of concepts activates source-only and
    target-only synonym words, which realizes the shared / source-private
    / target-private vocabulary split.
    """
    rng = np.random.default_rng(pair_seed + 17)
    cats = list(CATEGORY_CONCEPTS)

    tgt_var = set(str(c) for c in rng.choice(cats, size=n_target_variant_categories, replace=False))
    remaining = [c for c in cats if c not in tgt_var]
    src_var = set(str(c) for c in rng.choice(remaining, size=min(n_source_variant_categories, len(remaining)), replace=False))
    # a few non-category concepts also get domain-specific words
    tgt_var.update({"small", "top", "bottom", "near", "holding"})
    src_var.update({"left", "above"})

    def synonyms_for(domain: str) -> dict[str, tuple[str, ...]]:
        table = {}
        for concept, (base, src_w, tgt_w) in LEXICON.items():
            words = [base]
            if domain == "source" and concept in src_var:
                words.append(src_w)
            if domain == "target" and concept in tgt_var:
                words.append(tgt_w)
            table[concept] = tuple(words)
        return table

    sem_pairs = {}
    for i, c1 in enumerate(sorted(cats)):
        for c2 in sorted(cats)[i:]:
            if rng.random() < 0.4:
                sem_pairs[(c1, c2)] = str(rng.choice(SEMANTIC_RELATIONS))

    offset_dir = rng.normal(size=32)
    offset_dir /= np.linalg.norm(offset_dir)

    source = DomainSpec(
        domain="source",
        categories=tuple(cats),
        synonyms=synonyms_for("source"),
        semantic_pairs=sem_pairs,
        template_mix={"name": 0.3, "attribute": 0.2, "location": 0.3, "relation": 0.2},
        n_scenes=source_scenes,
        n_expressions=source_expressions,
        feature_rotation_deg=0.0,
        feature_offset=tuple(0.0 for _ in range(32)),
        noise_scale=noise_scale,
        box_grow=0.0,
        box_shift=(0.0, 0.0),
        variant_usage=variant_usage,
        lexicon_seed=pair_seed,
    )
    target = DomainSpec(
        domain="target",
        categories=tuple(cats),
        synonyms=synonyms_for("target"),
        semantic_pairs=sem_pairs,
        template_mix={"name": 0.2, "attribute": 0.15, "location": 0.25, "relation": 0.4},
        n_scenes=target_scenes,
        n_expressions=target_expressions,
        feature_rotation_deg=target_rotation_deg,
        feature_offset=tuple(float(x) for x in (target_offset_scale * offset_dir)),
        noise_scale=noise_scale,
        box_grow=3.0,
        box_shift=(2.0, -2.0),
        variant_usage=variant_usage,
        lexicon_seed=pair_seed,
    )
    return source, target


def swap_pair(source: DomainSpec, target: DomainSpec) -> tuple[DomainSpec, DomainSpec]:
    """Swap the roles of the two domains (for direction tgt2src)."""
    new_source = replace(target, domain="source")
    new_target = replace(source, domain="target")
    return new_source, new_target
