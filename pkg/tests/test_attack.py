import dataclasses
import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import (
    SYNTH_A_CLASS_TOTALS,
    SYNTH_A_CLASSES,
    SYNTH_A_TAG_COUNTS,
    SYNTH_A_VOCAB,
    make_provider,
)
from ragtag.attack import (
    AttackConfig,
    AttackPlan,
    CandidatePool,
    TagModification,
    TagStatistics,
    adversarial_impact,
    adversarial_score,
    apply_poisoning,
    build_candidate_pool,
    collect_tag_statistics,
    default_target_map,
    plan_attack,
    read_plan,
    select_adversarial_tags,
    semantic_relevance,
    tag_class_probability,
    write_plan,
)
from ragtag.corpus import Dataset, ItemRecord, PopularityClass
from ragtag.embedding import build_item_document, cosine_similarity, embed_texts

POP = PopularityClass.POPULAR
MID = PopularityClass.MID_TAIL
LT = PopularityClass.LONG_TAIL

EPS = 1e-6


def stats_of(counts, totals, vocab):
    return TagStatistics(counts=counts, class_totals=totals, vocabulary_size=vocab)


def pool_of(item_id, tags, provenance="global"):
    return CandidatePool(item_id=item_id, tags=frozenset(tags), provenance=provenance)


class TestStatistics:
    def test_synth_a_hand_counts(self, synth_a):
        stats = collect_tag_statistics(synth_a)
        assert dict(stats.counts) == SYNTH_A_TAG_COUNTS
        assert dict(stats.class_totals) == SYNTH_A_CLASS_TOTALS
        assert stats.vocabulary_size == SYNTH_A_VOCAB

    def test_tagless_dataset(self):
        items = {1: ItemRecord(item_id=1, title="X (2000)", genres=("Drama",))}
        d = Dataset(frozenset(), items, (), {1: POP})
        stats = collect_tag_statistics(d)
        assert dict(stats.counts) == {}
        assert stats.vocabulary_size == 0
        assert all(total == 0 for total in stats.class_totals.values())

    def test_unclassified_item_rejected(self, synth_a):
        d = dataclasses.replace(synth_a, popularity={1: POP})
        with pytest.raises(ValueError, match="without a popularity class"):
            collect_tag_statistics(d)

    def test_counting_is_item_level_presence(self):
        # the same tag on two popular items counts 2, not per-assigner
        items = {
            1: ItemRecord(1, "A (2000)", ("Drama",), frozenset({"hero"})),
            2: ItemRecord(2, "B (2000)", ("Drama",), frozenset({"hero"})),
            3: ItemRecord(3, "C (2000)", ("Drama",), frozenset({"hero"})),
        }
        d = Dataset(frozenset(), items, (), {1: POP, 2: POP, 3: LT})
        stats = collect_tag_statistics(d)
        assert stats.counts[("hero", POP)] == 2
        assert stats.counts[("hero", LT)] == 1


class TestProbability:
    def test_smoothing_fixture(self):
        stats = stats_of({("t", POP): 5}, {POP: 20}, 10)
        expected = (5 + EPS) / (20 + EPS * 10)
        value = tag_class_probability("t", POP, stats, EPS)
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.25, abs=1e-6)

    def test_unseen_tag_fixture(self):
        stats = stats_of({}, {POP: 20}, 10)
        value = tag_class_probability("ghost", POP, stats, EPS)
        assert value == pytest.approx(EPS / (20 + 1e-5), abs=1e-12)
        assert value == pytest.approx(5.0e-8, abs=1e-9)

    def test_degenerate_empty_corpus(self):
        stats = stats_of({}, {POP: 0, MID: 0, LT: 0}, 0)
        assert tag_class_probability("any", POP, stats, EPS) == 0.0

    def test_epsilon_must_be_positive(self):
        stats = stats_of({}, {POP: 1}, 1)
        with pytest.raises(ValueError, match="epsilon"):
            tag_class_probability("t", POP, stats, 0.0)

    def test_synth_a_probabilities_sum_to_one(self, synth_a):
        stats = collect_tag_statistics(synth_a)
        vocabulary = {tag for tag, _ in stats.counts}
        assert len(vocabulary) == SYNTH_A_VOCAB
        for cls in PopularityClass:
            total = sum(tag_class_probability(t, cls, stats, EPS) for t in vocabulary)
            assert total == pytest.approx(1.0, abs=1e-9)


class TestImpact:
    def test_hand_fixture(self):
        stats = stats_of({("t", LT): 5, ("t", POP): 1}, {LT: 20, POP: 20}, 10)
        value = adversarial_impact("t", POP, LT, stats, EPS)
        p_target = (5 + EPS) / (20 + EPS * 10)
        p_orig = (1 + EPS) / (20 + EPS * 10)
        assert value == pytest.approx(math.log(p_target / (p_orig + EPS)), abs=1e-12)
        assert value == pytest.approx(1.60944, abs=1e-4)  # ~ln 5 up to smoothing

    def test_identical_counts_give_near_zero(self):
        stats = stats_of({("t", POP): 4, ("t", LT): 4}, {POP: 20, LT: 20}, 10)
        value = adversarial_impact("t", POP, LT, stats, EPS)
        assert -1e-5 < value <= 0.0

    def test_synth_a_signs(self, synth_a):
        stats = collect_tag_statistics(synth_a)
        # quiet appears only on long-tail items, hero only on popular ones
        assert adversarial_impact("quiet", POP, LT, stats, EPS) > 0
        assert adversarial_impact("hero", POP, LT, stats, EPS) < 0

    def test_same_class_rejected(self):
        stats = stats_of({}, {POP: 1}, 1)
        with pytest.raises(ValueError, match="must differ"):
            adversarial_impact("t", POP, POP, stats, EPS)

    @given(
        c_pop=st.integers(min_value=1, max_value=40),
        c_lt=st.integers(min_value=1, max_value=40),
        extra_frac=st.floats(min_value=0.0, max_value=3.0),
    )
    def test_antisymmetry_for_shared_tags(self, c_pop, c_lt, extra_frac):
        # first-order in epsilon, |A(o,t) + A(t,o)| ~ eps*(1/p_t + 1/p_o);
        # keeping each class probability >= 1/4 bounds that by 8*eps < 10*eps
        stats = stats_of(
            {("t", POP): c_pop, ("t", LT): c_lt},
            {POP: c_pop + int(extra_frac * c_pop), LT: c_lt + int(extra_frac * c_lt)},
            5,
        )
        forward = adversarial_impact("t", POP, LT, stats, EPS)
        backward = adversarial_impact("t", LT, POP, stats, EPS)
        assert abs(forward + backward) <= 10 * EPS * max(1.0, abs(forward))

    @given(
        count=st.integers(min_value=0, max_value=30),
        others=st.integers(min_value=0, max_value=30),
        vocab=st.integers(min_value=2, max_value=50),
    )
    def test_strictly_monotone_in_target_count(self, count, others, vocab):
        lo = stats_of({("t", LT): count, ("t", POP): 1}, {LT: count + others, POP: 5}, vocab)
        hi = stats_of(
            {("t", LT): count + 1, ("t", POP): 1}, {LT: count + 1 + others, POP: 5}, vocab
        )
        assert adversarial_impact("t", POP, LT, hi, EPS) > adversarial_impact(
            "t", POP, LT, lo, EPS
        )


class TestRelevance:
    def test_identity_text_scores_one(self, provider):
        item = ItemRecord(1, "Steel Vanguard (2011)", ("Action",), frozenset({"hero"}))
        tag = build_item_document(item).text
        assert semantic_relevance(tag, item, provider) == pytest.approx(1.0, abs=1e-12)

    def test_matches_standalone_cosine(self, synth_a, provider):
        item = synth_a.items[5]
        tag_vec, doc_vec = embed_texts(
            ["meditative", build_item_document(item).text], provider
        )
        assert semantic_relevance("meditative", item, provider) == pytest.approx(
            cosine_similarity(tag_vec, doc_vec), abs=1e-15
        )

    def test_token_disjoint_pairs_near_orthogonal(self):
        """Random-projection embeddings keep disjoint-vocabulary pairs below |cos| 0.2.

        Empirical bound at dim 256: max |cos| over these 1000 seeded trials
        is 0.1898 (p99 0.169), frozen before the implementation existed.
        """
        provider = make_provider(dim=256, seed=0, model="m")
        rng = np.random.default_rng(12345)
        alpha = [f"alpha{i}" for i in range(2000)]
        beta = [f"beta{i}" for i in range(2000)]
        worst = 0.0
        for _ in range(1000):
            tag = alpha[rng.integers(len(alpha))]
            doc_words = rng.choice(beta, size=rng.integers(5, 30), replace=False)
            doc = "Title: " + " ".join(doc_words)
            tag_vec, doc_vec = embed_texts([tag, doc], provider)
            worst = max(worst, abs(cosine_similarity(tag_vec, doc_vec)))
        assert worst < 0.2


class TestScore:
    def test_zero_impact_zeroes_score(self):
        assert adversarial_score(0.0, 0.73) == 0.0

    def test_multiplication_fixture(self):
        assert adversarial_score(1.60944, 0.5) == pytest.approx(0.80472, abs=1e-12)

    def test_sign_rule(self):
        assert adversarial_score(-2.0, 0.5) < 0
        assert adversarial_score(2.0, -0.5) < 0
        assert adversarial_score(-2.0, -0.5) > 0


def attacker_vectors(dataset, provider):
    ids = sorted(dataset.items)
    docs = [build_item_document(dataset.items[i]).text for i in ids]
    return dict(zip(ids, embed_texts(docs, provider)))


class TestCandidatePool:
    def test_saturated_local_equals_global(self, synth_a, provider):
        vectors = attacker_vectors(synth_a, provider)
        item = synth_a.items[5]
        local_cfg = AttackConfig(strategy="local", k=3, local_pool_neighbors=2)
        global_cfg = AttackConfig(strategy="global", k=3)
        local = build_candidate_pool(item, synth_a, local_cfg, vectors)
        global_ = build_candidate_pool(item, synth_a, global_cfg, vectors)
        assert local.tags == global_.tags == frozenset(
            {"hero", "battle", "franchise", "spectacle"}
        )
        assert local.provenance == "local"
        assert global_.provenance == "global"

    def test_own_tags_always_removed(self, synth_a, provider):
        vectors = attacker_vectors(synth_a, provider)
        # give the long-tail item every popular-class tag and then some
        loaded = dataclasses.replace(
            synth_a.items[5],
            tags=frozenset({"hero", "battle", "franchise", "spectacle", "indie"}),
        )
        d = dataclasses.replace(synth_a, items={**synth_a.items, 5: loaded})
        pool = build_candidate_pool(loaded, d, AttackConfig(strategy="global", k=1), vectors)
        assert pool.tags == frozenset()

    def test_local_neighbor_choice_matches_brute_force(self, synth_a, provider):
        vectors = attacker_vectors(synth_a, provider)
        cfg = AttackConfig(strategy="local", k=1, local_pool_neighbors=1)
        for item_id, cls in SYNTH_A_CLASSES.items():
            if cls is MID:
                continue
            target = default_target_map()[cls]
            members = [i for i, c in SYNTH_A_CLASSES.items() if c is target]
            best = min(
                members,
                key=lambda m: (
                    -cosine_similarity(vectors[item_id], vectors[m]),
                    m,
                ),
            )
            pool = build_candidate_pool(synth_a.items[item_id], synth_a, cfg, vectors)
            expected = synth_a.items[best].tags - synth_a.items[item_id].tags
            assert pool.tags == frozenset(expected)

    def test_empty_target_class_gives_empty_pool(self, provider):
        items = {
            1: ItemRecord(1, "A (2000)", ("Drama",), frozenset({"a"})),
            2: ItemRecord(2, "B (2001)", ("Drama",), frozenset({"b"})),
        }
        d = Dataset(frozenset(), items, (), {1: POP, 2: MID})
        vectors = attacker_vectors(d, provider)
        pool = build_candidate_pool(
            items[1], d, AttackConfig(strategy="global", k=1), vectors
        )
        assert pool.tags == frozenset()

    def test_untargeted_class_rejected(self, synth_a, provider):
        vectors = attacker_vectors(synth_a, provider)
        with pytest.raises(ValueError, match="no attack target"):
            build_candidate_pool(
                synth_a.items[3], synth_a, AttackConfig(strategy="global", k=1), vectors
            )


class TestSelection:
    def test_argmax_fixture(self):
        scores = {"t1": 0.9, "t2": 0.5, "t3": 0.4}
        mod = select_adversarial_tags(
            1, pool_of(1, scores), 1, scores, original_class=POP, target_class=LT
        )
        assert mod.added_tags == (("t1", 0.9),)

    def test_top_two_matches_exhaustive_best_pair(self):
        scores = {"t1": 0.9, "t2": 0.5, "t3": 0.4}
        mod = select_adversarial_tags(
            1, pool_of(1, scores), 2, scores, original_class=POP, target_class=LT
        )
        chosen = {t for t, _ in mod.added_tags}
        best_pair = max(
            itertools.combinations(scores, 2), key=lambda pair: sum(scores[t] for t in pair)
        )
        assert chosen == {"t1", "t2"} == set(best_pair)

    def test_ties_resolved_by_tag_string(self):
        scores = {"zeta": 1.0, "alpha": 1.0, "mid": 0.5}
        mod = select_adversarial_tags(
            1, pool_of(1, scores), 2, scores, original_class=POP, target_class=LT
        )
        assert [t for t, _ in mod.added_tags] == ["alpha", "zeta"]

    def test_small_pool_returns_everything(self):
        scores = {"only": 0.3}
        mod = select_adversarial_tags(
            1, pool_of(1, scores), 5, scores, original_class=POP, target_class=LT
        )
        assert mod.added_tags == (("only", 0.3),)

    def test_empty_pool_returns_empty_modification(self):
        mod = select_adversarial_tags(
            1, pool_of(1, ()), 3, {}, original_class=POP, target_class=LT
        )
        assert mod.added_tags == ()

    def test_missing_score_rejected(self):
        with pytest.raises(ValueError, match="no score for pool tags"):
            select_adversarial_tags(
                1, pool_of(1, {"a", "b"}), 1, {"a": 0.1}, original_class=POP, target_class=LT
            )

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError, match="k must be"):
            select_adversarial_tags(
                1, pool_of(1, {"a"}), 0, {"a": 0.1}, original_class=POP, target_class=LT
            )

    @settings(max_examples=30)
    @given(seed=st.integers(min_value=0, max_value=2**32 - 1), k=st.sampled_from([1, 3, 5]))
    def test_matches_subset_enumeration(self, seed, k):
        rng = random.Random(seed)
        tags = [f"tag{i:02d}" for i in range(rng.randint(1, 12))]
        values = [round(rng.uniform(-2, 2), 3) for _ in tags]
        if len(tags) > 1 and rng.random() < 0.5:
            values[1] = values[0]  # force ties through part of the runs
        scores = dict(zip(tags, values))
        mod = select_adversarial_tags(
            1, pool_of(1, tags), k, scores, original_class=POP, target_class=LT
        )
        take = min(k, len(tags))
        best = max(
            sum(scores[t] for t in combo)
            for combo in itertools.combinations(tags, take)
        )
        assert sum(s for _, s in mod.added_tags) == pytest.approx(best, abs=1e-12)
        assert len(mod.added_tags) == take


def brute_force_local_plan(dataset, provider, k, m):
    """Textbook reimplementation of the local attack used as an oracle."""
    counts = {}
    totals = {cls: 0 for cls in PopularityClass}
    vocab = set()
    for item_id in dataset.items:
        cls = dataset.popularity[item_id]
        for tag in dataset.items[item_id].tags:
            counts[(tag, cls)] = counts.get((tag, cls), 0) + 1
            totals[cls] += 1
            vocab.add(tag)

    def prob(tag, cls):
        return (counts.get((tag, cls), 0) + EPS) / (totals[cls] + EPS * len(vocab))

    vectors = attacker_vectors(dataset, provider)
    plan = {}
    for item_id in sorted(dataset.items):
        cls = dataset.popularity[item_id]
        if cls is MID:
            continue
        target = default_target_map()[cls]
        members = sorted(i for i, c in dataset.popularity.items() if c is target)
        ranked = sorted(
            members, key=lambda i: (-cosine_similarity(vectors[item_id], vectors[i]), i)
        )[:m]
        pool = set()
        for i in ranked:
            pool |= dataset.items[i].tags
        pool -= dataset.items[item_id].tags
        scored = {}
        for tag in pool:
            impact = math.log(prob(tag, target) / (prob(tag, cls) + EPS))
            relevance = semantic_relevance(tag, dataset.items[item_id], provider)
            scored[tag] = impact * relevance
        chosen = sorted(pool, key=lambda t: (-scored[t], t))[:k]
        plan[item_id] = [(t, scored[t]) for t in chosen]
    return plan


class TestPlan:
    def test_synth_a_matches_independent_reimplementation(self, synth_a, provider):
        cfg = AttackConfig(strategy="local", k=3, local_pool_neighbors=2)
        plan = plan_attack(synth_a, cfg, provider)
        expected = brute_force_local_plan(synth_a, provider, k=3, m=2)
        assert {m.item_id for m in plan.modifications} == set(expected)
        for mod in plan.modifications:
            want = expected[mod.item_id]
            assert [t for t, _ in mod.added_tags] == [t for t, _ in want]
            for (_, got), (_, exp) in zip(mod.added_tags, want):
                assert got == pytest.approx(exp, abs=1e-12)

    def test_only_popular_and_longtail_touched(self, synth_a, provider):
        plan = plan_attack(synth_a, AttackConfig(strategy="global", k=2), provider)
        touched = {m.item_id for m in plan.modifications}
        assert touched == {1, 2, 5, 6}
        for mod in plan.modifications:
            assert mod.original_class in (POP, LT)
            assert mod.target_class is default_target_map()[mod.original_class]

    def test_plan_is_deterministic(self, synth_a):
        cfg = AttackConfig(strategy="local", k=3, local_pool_neighbors=2)
        a = plan_attack(synth_a, cfg, make_provider(seed=11))
        b = plan_attack(synth_a, cfg, make_provider(seed=11))
        assert a == b

    def test_modifications_sorted_by_item(self, synth_a, provider):
        plan = plan_attack(synth_a, AttackConfig(strategy="global", k=1), provider)
        ids = [m.item_id for m in plan.modifications]
        assert ids == sorted(ids)

    def test_duplicate_modifications_rejected(self):
        mod = TagModification(1, (), POP, LT)
        with pytest.raises(ValueError, match="more than one modification"):
            AttackPlan(config=AttackConfig(strategy="global", k=1), modifications=(mod, mod))


class TestApply:
    def test_empty_plan_is_identity(self, synth_a):
        plan = AttackPlan(config=AttackConfig(strategy="global", k=1), modifications=())
        assert apply_poisoning(synth_a, plan) == synth_a

    def test_locality(self, synth_a):
        items = dict(synth_a.items)
        items[42] = ItemRecord(42, "Night Watch (2012)", ("Horror",), frozenset({"dark"}))
        d = dataclasses.replace(synth_a, items=items, popularity={**synth_a.popularity, 42: LT})
        plan = AttackPlan(
            config=AttackConfig(strategy="global", k=1),
            modifications=(TagModification(42, (("zombie", 0.5),), LT, POP),),
        )
        poisoned = apply_poisoning(d, plan)
        assert poisoned.items[42].tags == frozenset({"dark", "zombie"})
        for item_id in d.items:
            if item_id != 42:
                assert poisoned.items[item_id] == d.items[item_id]

    def test_stealth_only_tags_of_targeted_items_change(self, synth_a, provider):
        plan = plan_attack(synth_a, AttackConfig(strategy="local", k=3, local_pool_neighbors=2), provider)
        poisoned = apply_poisoning(synth_a, plan)
        assert poisoned.users == synth_a.users
        assert poisoned.interactions == synth_a.interactions
        assert poisoned.popularity == synth_a.popularity
        added_by_item = {m.item_id: {t for t, _ in m.added_tags} for m in plan.modifications}
        for item_id, before in synth_a.items.items():
            after = poisoned.items[item_id]
            assert after.title == before.title
            assert after.genres == before.genres
            assert after.description == before.description
            if synth_a.popularity[item_id] is MID:
                assert after == before
            else:
                assert after.tags == before.tags | added_by_item[item_id]

    def test_unknown_item_rejected(self, synth_a):
        plan = AttackPlan(
            config=AttackConfig(strategy="global", k=1),
            modifications=(TagModification(999, (("x", 0.1),), LT, POP),),
        )
        with pytest.raises(ValueError, match="unknown item 999"):
            apply_poisoning(synth_a, plan)


class TestPlanSerialization:
    def test_round_trip(self, synth_a, provider, tmp_path):
        cfg = AttackConfig(strategy="local", k=2, local_pool_neighbors=2)
        plan = plan_attack(synth_a, cfg, provider)
        path = tmp_path / "plan.jsonl"
        write_plan(plan, path)
        assert read_plan(path) == plan

    def test_missing_config_record_rejected(self, tmp_path):
        path = tmp_path / "plan.jsonl"
        path.write_text('{"record": "modification", "item_id": 1}\n', encoding="utf-8")
        with pytest.raises(ValueError, match="config record"):
            read_plan(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "plan.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError, match="empty attack plan"):
            read_plan(path)

    def test_unknown_record_kind_rejected(self, synth_a, provider, tmp_path):
        path = tmp_path / "plan.jsonl"
        write_plan(plan_attack(synth_a, AttackConfig(strategy="global", k=1), provider), path)
        path.write_text(
            path.read_text(encoding="utf-8") + '{"record": "extra"}\n', encoding="utf-8"
        )
        with pytest.raises(ValueError, match="unexpected record kind"):
            read_plan(path)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"strategy": "sideways", "k": 1},
            {"strategy": "local", "k": 0},
            {"strategy": "local", "k": 1, "epsilon": 0.0},
            {"strategy": "local", "k": 1, "local_pool_neighbors": 0},
            {"strategy": "local", "k": 1, "target_map": {POP: POP}},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)

    def test_default_map_promotes_longtail_and_demotes_popular(self):
        assert default_target_map() == {POP: LT, LT: POP}
