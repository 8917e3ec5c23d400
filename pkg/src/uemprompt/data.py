"""MovieLens-style ingestion, preference labels, text rendering and synthetic corpora."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .autodiff import make_rng

log = logging.getLogger(__name__)

MOVIELENS_GENRES: tuple[str, ...] = (
    "Action",
    "Adventure",
    "Animation",
    "Children",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "IMAX",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
)

SYNTHETIC_GENRES: tuple[str, ...] = tuple(f"G{i:02d}" for i in range(1, 20))

LIKE_PREFIX = "The user likes to watch movies with genres"
DISLIKE_CLAUSE = "doesn't like to watch movies with genres"
NEUTRAL_TARGET = "The user has no strong genre preferences"

MIN_GENRE_RATINGS = 3
LIKED_ABOVE = 3.5
DISLIKED_BELOW = 3.0
TOP_GENRES = 3


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class GenreVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("genre vocabulary has duplicates")
        if not self.names:
            raise DataError("genre vocabulary is empty")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        return self.names.index(name)


MOVIELENS_VOCAB = GenreVocabulary(MOVIELENS_GENRES)
SYNTHETIC_VOCAB = GenreVocabulary(SYNTHETIC_GENRES)


@dataclass(frozen=True)
class MovieRecord:
    movie_id: str
    title: str
    genres: tuple[str, ...]
    description: str = ""

    def __post_init__(self):
        if not self.genres:
            raise DataError(f"movie {self.movie_id} has no genres")


@dataclass(frozen=True)
class HistoryItem:
    movie: MovieRecord
    rating: float
    timestamp: int

    def __post_init__(self):
        if not (0.5 <= self.rating <= 5.0) or self.rating * 2 != int(self.rating * 2):
            raise DataError(f"rating {self.rating} is not on the half-star grid")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


def _chrono_key(item: HistoryItem):
    return (item.timestamp, item.movie.movie_id)


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    items: tuple[HistoryItem, ...]

    @classmethod
    def from_items(cls, user_id: str, items: Iterable[HistoryItem]) -> "UserHistory":
        return cls(user_id, tuple(sorted(items, key=_chrono_key)))

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class PreferenceLabel:
    liked: tuple[str, ...]
    disliked: tuple[str, ...]
    target_text: str


# ---------------------------------------------------------------- rendering


def format_rating(rating: float) -> str:
    return str(int(rating)) if float(rating).is_integer() else f"{rating:g}"


def render_history_item(item: HistoryItem) -> tuple[str, str, str]:
    """The three segment texts of one history item: title/genre, rating, description."""
    m = item.movie
    return (
        f"The movie {m.title} is listed with genres {', '.join(m.genres)}",
        f"The movie is rated with {format_rating(item.rating)} stars",
        m.description,
    )


def render_history_text(history: UserHistory) -> str:
    """Concatenated text form of a history, used by the text-prompting baseline."""
    parts = []
    for item in history.items:
        parts.extend(t for t in render_history_item(item) if t)
    return " . ".join(parts)


def render_target(liked: Sequence[str], disliked: Sequence[str]) -> str:
    if set(liked) & set(disliked):
        raise ValueError("liked and disliked genres overlap")
    if liked and disliked:
        return f"{LIKE_PREFIX} {', '.join(liked)} and {DISLIKE_CLAUSE} {', '.join(disliked)}"
    if liked:
        return f"{LIKE_PREFIX} {', '.join(liked)}"
    if disliked:
        return f"The user {DISLIKE_CLAUSE} {', '.join(disliked)}"
    return NEUTRAL_TARGET


# ------------------------------------------------------------------- labels


def genre_rating_stats(items: Iterable[HistoryItem]) -> dict[str, list[float]]:
    ratings: dict[str, list[float]] = defaultdict(list)
    for item in items:
        for g in item.movie.genres:
            ratings[g].append(item.rating)
    return ratings


def build_preference_labels(history: UserHistory) -> PreferenceLabel:
    """Top-3 liked (mean > 3.5) and disliked (mean < 3) genres over the full history.

    Genres rated fewer than three times are ignored.  Liked genres rank by
    (mean desc, count desc, name asc); disliked by (mean asc, count desc, name asc).
    """
    stats = []
    for g, rs in genre_rating_stats(history.items).items():
        if len(rs) >= MIN_GENRE_RATINGS:
            stats.append((g, math.fsum(rs) / len(rs), len(rs)))
    liked = sorted((s for s in stats if s[1] > LIKED_ABOVE), key=lambda s: (-s[1], -s[2], s[0]))
    disliked = sorted((s for s in stats if s[1] < DISLIKED_BELOW), key=lambda s: (s[1], -s[2], s[0]))
    liked_names = tuple(s[0] for s in liked[:TOP_GENRES])
    disliked_names = tuple(s[0] for s in disliked[:TOP_GENRES])
    return PreferenceLabel(liked_names, disliked_names, render_target(liked_names, disliked_names))


def truncate_history(history: UserHistory, p: int) -> UserHistory:
    """Keep the ``p`` most recent items, in chronological order."""
    if p < 0:
        raise ValueError("p must be >= 0")
    if p >= len(history.items):
        return history
    return UserHistory(history.user_id, history.items[len(history.items) - p:] if p else ())


def filter_min_views(users: Iterable[UserHistory], min_views: int = 20) -> list[UserHistory]:
    return [u for u in users if len(u.items) >= min_views]


# ------------------------------------------------------------------- splits


def _unit_hash(user_id: str, salt: str) -> float:
    digest = hashlib.sha256(f"{salt}\x00{user_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def _check_fractions(fractions) -> None:
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")


def assign_split(user_id: str, salt: str, fractions=(0.957, 0.0215, 0.0215)) -> str:
    _check_fractions(fractions)
    u = _unit_hash(user_id, salt)
    acc = 0.0
    names = ("train", "dev", "test")
    for name, frac in zip(names, fractions):
        acc += frac
        if u < acc:
            return name
    return names[-1]


def split_users(users: Sequence[UserHistory], fractions=(0.957, 0.0215, 0.0215), salt: str = "uem"):
    """Deterministic train/dev/test partition by hashing (user_id, salt)."""
    _check_fractions(fractions)
    out: dict[str, list[UserHistory]] = {"train": [], "dev": [], "test": []}
    for u in users:
        out[assign_split(u.user_id, salt, fractions)].append(u)
    return out["train"], out["dev"], out["test"]


# ------------------------------------------------------------------- ingest


@dataclass
class IngestStats:
    rows: int = 0
    unknown_movie: int = 0
    duplicates: int = 0
    missing_description: int = 0
    movies_without_genres: int = 0


@dataclass
class IngestResult:
    users: list[UserHistory]
    movies: dict[str, MovieRecord]
    stats: IngestStats = field(default_factory=IngestStats)


# MovieLens releases spell these columns in camelCase.
_HEADER_ALIASES = {"userId": "user_id", "movieId": "movie_id"}


def _read_csv(path, expected: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [_HEADER_ALIASES.get(h.strip(), h.strip()) for h in header] != list(expected):
            raise DataError(f"{path}:1: expected header {','.join(expected)}, got {','.join(header)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{reader.line_num}: expected {len(expected)} fields, got {len(row)}")
            yield reader.line_num, row


def ingest(ratings_path, movies_path, descriptions_path=None, genres: GenreVocabulary = MOVIELENS_VOCAB) -> IngestResult:
    """Join ratings, movie metadata and (optionally) descriptions into histories."""
    stats = IngestStats()
    descriptions: dict[str, str] = {}
    if descriptions_path is not None:
        for _, (title, desc) in _read_csv(descriptions_path, ("title", "description")):
            descriptions.setdefault(title, desc)

    movies: dict[str, MovieRecord] = {}
    for line, (movie_id, title, genre_field) in _read_csv(movies_path, ("movie_id", "title", "genres")):
        names = tuple(g for g in genre_field.split("|") if g and g != "(no genres listed)")
        unknown = [g for g in names if g not in genres]
        if unknown:
            raise DataError(f"{movies_path}:{line}: unknown genres {unknown}")
        if not names:
            stats.movies_without_genres += 1
            continue
        desc = descriptions.get(title)
        if desc is None:
            desc = ""
            if descriptions_path is not None:
                stats.missing_description += 1
        movies[movie_id] = MovieRecord(movie_id, title, names, desc)

    per_user: dict[str, list[HistoryItem]] = defaultdict(list)
    seen: set[tuple[str, str, int]] = set()
    for line, (user_id, movie_id, rating, ts) in _read_csv(ratings_path, ("user_id", "movie_id", "rating", "timestamp")):
        stats.rows += 1
        try:
            r = float(rating)
            t = int(ts)
        except ValueError:
            raise DataError(f"{ratings_path}:{line}: cannot parse rating/timestamp") from None
        movie = movies.get(movie_id)
        if movie is None:
            stats.unknown_movie += 1
            continue
        key = (user_id, movie_id, t)
        if key in seen:
            stats.duplicates += 1
            continue
        seen.add(key)
        try:
            per_user[user_id].append(HistoryItem(movie, r, t))
        except DataError as exc:
            raise DataError(f"{ratings_path}:{line}: {exc}") from None

    users = [UserHistory.from_items(uid, items) for uid, items in sorted(per_user.items())]
    if stats.unknown_movie or stats.duplicates or stats.missing_description:
        log.warning(
            "ingest: %d unknown-movie rows skipped, %d duplicates dropped, %d movies without description",
            stats.unknown_movie,
            stats.duplicates,
            stats.missing_description,
        )
    return IngestResult(users, movies, stats)


# ---------------------------------------------------------------- synthetic

_FILLER = (
    "story", "film", "characters", "journey", "scenes", "world", "cast",
    "director", "moments", "plot", "style", "tone", "audience", "score",
)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 400
    n_movies: int = 300
    genres: int = 19
    min_items: int = 40
    max_items: int = 60
    noise: float = 0.0
    seed: int = 0
    max_genres_per_movie: int = 1
    desc_words: int = 12
    liked_bias: float = 0.0

    def __post_init__(self):
        if not 1 <= self.genres <= len(SYNTHETIC_GENRES):
            raise ValueError(f"genres must be in [1, {len(SYNTHETIC_GENRES)}]")
        if self.n_users < 0 or self.n_movies < 1:
            raise ValueError("need n_users >= 0 and n_movies >= 1")
        if not 0 <= self.min_items <= self.max_items:
            raise ValueError("need 0 <= min_items <= max_items")
        if not 0.0 <= self.noise <= 1.0 or not 0.0 <= self.liked_bias <= 1.0:
            raise ValueError("noise and liked_bias must be in [0, 1]")
        if self.max_genres_per_movie < 1 or self.desc_words < 0:
            raise ValueError("max_genres_per_movie must be >= 1 and desc_words >= 0")


@dataclass(frozen=True)
class LatentPreference:
    liked: tuple[str, ...]
    disliked: tuple[str, ...]


@dataclass
class SynthCorpus:
    movies: list[MovieRecord]
    users: list[UserHistory]
    latent: dict[str, LatentPreference]
    genres: GenreVocabulary


_LIKED_RATINGS = (4.0, 4.5, 5.0)
_DISLIKED_RATINGS = (1.0, 1.5, 2.0)
_NEUTRAL_RATINGS = (3.0, 3.5)
_ANY_RATINGS = tuple(x / 2 for x in range(1, 11))


def synth_generate(cfg: SynthConfig) -> SynthCorpus:
    """Seed-deterministic users with latent liked/disliked genre sets.

    A movie's rating follows the user's affinity to its genres: liked-only
    movies rate high, disliked-only low, everything else in the neutral band.
    With probability ``noise`` a rating is replaced by a uniform half-star.
    """
    rng = make_rng(cfg.seed)
    names = SYNTHETIC_GENRES[: cfg.genres]
    movies = []
    for i in range(cfg.n_movies):
        n_g = int(rng.integers(1, min(cfg.max_genres_per_movie, cfg.genres) + 1))
        gs = tuple(names[j] for j in sorted(rng.choice(cfg.genres, size=n_g, replace=False)))
        words = [f"{g.lower()}theme" for g in gs]
        words += [str(_FILLER[int(x)]) for x in rng.integers(0, len(_FILLER), size=cfg.desc_words)]
        desc = f"A {' '.join(g.lower() for g in gs)} film with " + " ".join(words)
        movies.append(MovieRecord(f"m{i:05d}", f"Movie {i:05d}", gs, desc))

    by_genre: dict[str, list[int]] = defaultdict(list)
    for idx, m in enumerate(movies):
        for g in m.genres:
            by_genre[g].append(idx)

    users, latent = [], {}
    for u in range(cfg.n_users):
        uid = f"u{u:06d}"
        perm = [names[int(j)] for j in rng.permutation(cfg.genres)]
        n_like = int(rng.integers(1, 4)) if cfg.genres >= 2 else 1
        n_dis = int(rng.integers(1, 4)) if cfg.genres >= 2 else 0
        n_like = min(n_like, cfg.genres)
        n_dis = min(n_dis, cfg.genres - n_like)
        liked = tuple(sorted(perm[:n_like]))
        disliked = tuple(sorted(perm[n_like:n_like + n_dis]))
        latent[uid] = LatentPreference(liked, disliked)
        liked_pool = sorted({i for g in liked for i in by_genre[g]})
        n_items = int(rng.integers(cfg.min_items, cfg.max_items + 1))
        items = []
        for t in range(n_items):
            if liked_pool and rng.random() < cfg.liked_bias:
                movie = movies[liked_pool[int(rng.integers(len(liked_pool)))]]
            else:
                movie = movies[int(rng.integers(cfg.n_movies))]
            has_l = any(g in liked for g in movie.genres)
            has_d = any(g in disliked for g in movie.genres)
            band = _LIKED_RATINGS if has_l and not has_d else _DISLIKED_RATINGS if has_d and not has_l else _NEUTRAL_RATINGS
            rating = float(band[int(rng.integers(len(band)))])
            if rng.random() < cfg.noise:
                rating = float(_ANY_RATINGS[int(rng.integers(len(_ANY_RATINGS)))])
            items.append(HistoryItem(movie, rating, 1_000_000 + 60 * t))
        users.append(UserHistory.from_items(uid, items))
    return SynthCorpus(movies, users, latent, GenreVocabulary(names))


# ------------------------------------------------------------------- shards


@dataclass
class Dataset:
    """A processed corpus: movies, users, split assignment and genre vocabulary."""

    movies: dict[str, MovieRecord]
    users: list[UserHistory]
    splits: dict[str, str]
    genres: GenreVocabulary
    source: str = "synthetic"
    latent: dict[str, LatentPreference] = field(default_factory=dict)

    def split(self, name: str) -> list[UserHistory]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [u for u in self.users if self.splits[u.user_id] == name]


def make_dataset(movies, users, genres: GenreVocabulary, salt: str, fractions, source: str, latent=None) -> Dataset:
    movie_map = movies if isinstance(movies, dict) else {m.movie_id: m for m in movies}
    splits = {u.user_id: assign_split(u.user_id, salt, fractions) for u in users}
    return Dataset(movie_map, list(users), splits, genres, source, dict(latent or {}))


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    tmp.replace(path)


def write_shards(ds: Dataset, out_dir) -> None:
    """Persist as ``meta.json``, ``movies.jsonl`` and ``users.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    movie_lines = [
        json.dumps({"movie_id": m.movie_id, "title": m.title, "genres": list(m.genres), "description": m.description}, ensure_ascii=False)
        for m in ds.movies.values()
    ]
    user_lines = []
    for u in ds.users:
        rec = {
            "user_id": u.user_id,
            "split": ds.splits[u.user_id],
            "items": [[it.movie.movie_id, it.rating, it.timestamp] for it in u.items],
        }
        lab = build_preference_labels(u)
        rec["label"] = {"liked": list(lab.liked), "disliked": list(lab.disliked), "target_text": lab.target_text}
        if u.user_id in ds.latent:
            lat = ds.latent[u.user_id]
            rec["latent"] = {"liked": list(lat.liked), "disliked": list(lat.disliked)}
        user_lines.append(json.dumps(rec, ensure_ascii=False))
    meta = {"format": "uem-shards v1", "source": ds.source, "genres": list(ds.genres.names), "n_users": len(ds.users), "n_movies": len(ds.movies)}
    _atomic_write_text(out / "movies.jsonl", "".join(line + "\n" for line in movie_lines))
    _atomic_write_text(out / "users.jsonl", "".join(line + "\n" for line in user_lines))
    _atomic_write_text(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_shards(in_dir) -> Dataset:
    src = Path(in_dir)
    try:
        meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{src}: missing meta.json") from None
    if meta.get("format") != "uem-shards v1":
        raise DataError(f"{src}: unsupported shard format {meta.get('format')!r}")
    movies = {}
    with open(src / "movies.jsonl", encoding="utf-8") as fh:
        for line in fh:
            r = json.loads(line)
            movies[r["movie_id"]] = MovieRecord(r["movie_id"], r["title"], tuple(r["genres"]), r["description"])
    users, splits, latent = [], {}, {}
    with open(src / "users.jsonl", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            r = json.loads(line)
            try:
                items = [HistoryItem(movies[mid], float(rating), int(ts)) for mid, rating, ts in r["items"]]
            except KeyError as exc:
                raise DataError(f"{src / 'users.jsonl'}:{n}: unknown movie {exc}") from None
            users.append(UserHistory.from_items(r["user_id"], items))
            splits[r["user_id"]] = r["split"]
            if "latent" in r:
                latent[r["user_id"]] = LatentPreference(tuple(r["latent"]["liked"]), tuple(r["latent"]["disliked"]))
    return Dataset(movies, users, splits, GenreVocabulary(tuple(meta["genres"])), meta.get("source", "unknown"), latent)
