import copy
import json

import numpy as np
import pytest

from kronlm.distill import (
    Adam,
    DistillWeights,
    TrainConfig,
    evaluate_lm,
    finetune_step,
    loss_attention,
    loss_cross_entropy,
    loss_embedding,
    loss_hidden,
    loss_total,
    perplexity,
    run_phase,
    sample_batch,
    train_step,
    weights_for_mode,
)
from kronlm.errors import NonFiniteLossError, ShapeError
from kronlm.model import ForwardTrace, attach_classifier
from kronlm.tensor_core import Rng, causal_mask, masked_softmax


def random_trace(rng, n_layers=2, h=2, t=4, d=6, v=8):
    atts = []
    for _ in range(n_layers):
        scores = rng.normal(h, t * t).reshape(h, t, t)
        atts.append(masked_softmax(scores, causal_mask(t)))
    return ForwardTrace(
        embedding_out=rng.normal(t, d),
        attentions=atts,
        hidden=[rng.normal(t, d) for _ in range(n_layers)],
        logits=rng.normal(t, v),
    )


def test_loss_embedding_identical_zero():
    tr = random_trace(Rng(0))
    assert loss_embedding(tr, tr) == 0.0


def test_loss_embedding_constant_offset():
    tr = random_trace(Rng(1))
    off = copy.deepcopy(tr)
    off.embedding_out = tr.embedding_out + 1.0
    assert abs(loss_embedding(off, tr) - 1.0) < 1e-12


def test_loss_embedding_formula_oracle():
    ts, tt = random_trace(Rng(2)), random_trace(Rng(3))
    expected = np.sum((ts.embedding_out - tt.embedding_out) ** 2) / ts.embedding_out.size
    assert abs(loss_embedding(ts, tt) - expected) < 1e-12


def test_loss_attention_identical_zero():
    tr = random_trace(Rng(4))
    assert loss_attention(tr, tr) == 0.0


def test_loss_attention_closed_form_two_token_row():
    # teacher row [1, 0], student row [0.5, 0.5]: KL = ln 2 for that row
    t = 2
    teacher = random_trace(Rng(5), n_layers=1, h=1, t=t)
    student = copy.deepcopy(teacher)
    teacher.attentions[0][0, 1] = np.array([1.0, 0.0])
    student.attentions[0][0, 1] = np.array([0.5, 0.5])
    teacher.attentions[0][0, 0] = np.array([1.0, 0.0])
    student.attentions[0][0, 0] = np.array([1.0, 0.0])
    # layer mean over (1 head x 2 rows): (0 + ln 2) / 2
    assert abs(loss_attention(student, teacher) - np.log(2.0) / 2) < 1e-12


def test_loss_attention_formula_oracle():
    ts, tt = random_trace(Rng(6)), random_trace(Rng(7))
    mask = causal_mask(4)
    expected = 0.0
    for att_s, att_t in zip(ts.attentions, tt.attentions):
        acc = 0.0
        for head in range(att_s.shape[0]):
            for i in range(att_s.shape[1]):
                for j in range(i + 1):
                    p, q = att_t[head, i, j], att_s[head, i, j]
                    if p > 0:
                        acc += p * np.log(p / q)
        expected += acc / (att_s.shape[0] * att_s.shape[1])
    assert abs(loss_attention(ts, tt) - expected) < 1e-10


def test_loss_attention_positive_for_different_distributions():
    ts, tt = random_trace(Rng(8)), random_trace(Rng(9))
    assert loss_attention(ts, tt) > 0


def test_loss_attention_student_direction_flag():
    ts, tt = random_trace(Rng(20)), random_trace(Rng(21))
    teacher_first = loss_attention(ts, tt, direction="teacher")
    student_first = loss_attention(ts, tt, direction="student")
    # KL is asymmetric; flipping the direction equals swapping the traces
    assert teacher_first != student_first
    assert abs(student_first - loss_attention(tt, ts, direction="teacher")) < 1e-12
    with pytest.raises(ValueError):
        loss_attention(ts, tt, direction="sideways")


def test_loss_hidden_identical_and_offset():
    tr = random_trace(Rng(10))
    assert loss_hidden(tr, tr) == 0.0
    off = copy.deepcopy(tr)
    off.hidden[0] = tr.hidden[0] + 2.0  # one layer offset by 2 -> MSE 4, others 0
    assert abs(loss_hidden(off, tr) - 4.0) < 1e-12


def test_loss_hidden_formula_oracle():
    ts, tt = random_trace(Rng(11)), random_trace(Rng(12))
    expected = sum(
        np.sum((hs - ht) ** 2) / hs.size for hs, ht in zip(ts.hidden, tt.hidden)
    )
    assert abs(loss_hidden(ts, tt) - expected) < 1e-12


def test_layer_subset_restricts_trace_losses():
    ts, tt = random_trace(Rng(30)), random_trace(Rng(31))
    d0 = ts.hidden[0] - tt.hidden[0]
    assert abs(loss_hidden(ts, tt, layers=(0,)) - np.mean(d0 * d0)) < 1e-12
    assert loss_hidden(ts, tt, layers=(0,)) + loss_hidden(ts, tt, layers=(1,)) == pytest.approx(
        loss_hidden(ts, tt)
    )
    assert loss_attention(ts, tt, layers=(1,)) < loss_attention(ts, tt)


def test_loss_cross_entropy_cases():
    logits = np.full((3, 4), -1e3)
    for i in range(3):
        logits[i, i] = 1e3
    assert loss_cross_entropy(logits, np.array([0, 1, 2])) < 1e-9

    uniform = np.zeros((5, 16))
    assert abs(loss_cross_entropy(uniform, np.zeros(5, dtype=int)) - np.log(16)) < 1e-12

    rng = Rng(13)
    rl = rng.normal(6, 8)
    ids = np.array([1, 0, 7, 3, 3, 5])
    z = rl - rl.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(6), ids].mean()
    assert abs(loss_cross_entropy(rl, ids) - expected) < 1e-10


def test_loss_total_degenerate_weights():
    ts, tt = random_trace(Rng(14)), random_trace(Rng(15))
    ids = np.array([0, 1, 2, 3])
    total, comps = loss_total(ts, tt, ids, DistillWeights(0, 0, 0, 1.0))
    assert abs(total - comps["L_ce"]) < 1e-12
    total_self, comps_self = loss_total(ts, ts, ids, DistillWeights(0.5, 0.5, 0.5, 0.1))
    assert abs(total_self - 0.1 * comps_self["L_ce"]) < 1e-12


def test_loss_total_pretrain_weights_hand_combination():
    ts, tt = random_trace(Rng(16)), random_trace(Rng(17))
    ids = np.array([2, 2, 1, 0])
    w = DistillWeights.pretrain()
    assert (w.alpha1, w.alpha2, w.alpha3, w.alpha4) == (0.5, 0.5, 0.5, 0.1)
    total, comps = loss_total(ts, tt, ids, w)
    hand = (
        0.5 * loss_embedding(ts, tt)
        + 0.5 * loss_attention(ts, tt)
        + 0.5 * loss_hidden(ts, tt)
        + 0.1 * loss_cross_entropy(ts.logits, ids)
    )
    assert abs(total - hand) < 1e-9


def test_distill_weights_validation():
    with pytest.raises(ValueError):
        DistillWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        DistillWeights(-0.1, 0, 0, 1)
    assert DistillWeights.finetune().alpha4 == 0.02


def test_weights_for_mode():
    assert weights_for_mode("none") is None
    assert weights_for_mode("lm") == DistillWeights(0, 0, 0, 1.0)
    kd = weights_for_mode("kd")
    assert kd.alpha4 == 0.0 and kd.alpha1 == 0.5
    assert weights_for_mode("lm+kd") == DistillWeights.pretrain()
    with pytest.raises(ValueError):
        weights_for_mode("bogus")


def make_batch(rng, vocab, batch, length):
    return rng.integers(0, vocab, size=(batch, length + 1)).astype(np.int64)


def test_train_step_zero_lr_leaves_student_unchanged(small_teacher, small_student):
    batch = make_batch(Rng(0), small_student.config.vocab_size, 2, 6)
    opt = Adam(small_student.named_parameters(), lr=0.0)
    before = small_student.state_hash()
    train_step(small_student, small_teacher, batch, DistillWeights.pretrain(), opt)
    assert small_student.state_hash() == before


def test_train_step_descends_on_repeated_batch(small_teacher, small_student):
    batch = make_batch(Rng(1), small_student.config.vocab_size, 2, 6)
    opt = Adam(small_student.named_parameters(), lr=1e-3)
    losses = [
        train_step(small_student, small_teacher, batch, DistillWeights.pretrain(), opt,
                   step_index=i).L_total
        for i in range(50)
    ]
    drops = sum(1 for i in range(1, 50) if losses[i] < losses[i - 1])
    assert drops >= 45, f"only {drops}/49 decreasing steps"


def test_teacher_frozen_across_steps(small_teacher, small_student):
    batch = make_batch(Rng(2), small_student.config.vocab_size, 2, 6)
    opt = Adam(small_student.named_parameters(), lr=1e-3)
    h0 = small_teacher.state_hash()
    for i in range(10):
        train_step(small_student, small_teacher, batch, DistillWeights.pretrain(), opt, step_index=i)
    assert small_teacher.state_hash() == h0


def test_step_metrics_linear_combination_identity(small_teacher, small_student):
    batch = make_batch(Rng(3), small_student.config.vocab_size, 2, 6)
    opt = Adam(small_student.named_parameters(), lr=1e-4)
    w = DistillWeights.pretrain()
    for i in range(5):
        m = train_step(small_student, small_teacher, batch, w, opt, step_index=i)
        combo = w.alpha1 * m.L_emb + w.alpha2 * m.L_att + w.alpha3 * m.L_hid + w.alpha4 * m.L_ce
        assert abs(m.L_total - combo) < 1e-9


def test_train_step_lm_mode_needs_no_teacher(small_student):
    batch = make_batch(Rng(4), small_student.config.vocab_size, 2, 6)
    opt = Adam(small_student.named_parameters(), lr=1e-3)
    m = train_step(small_student, None, batch, DistillWeights.lm_only(), opt)
    assert m.L_emb == 0.0 and m.L_att == 0.0 and m.L_hid == 0.0
    assert m.L_ce > 0


def test_train_step_kd_mode_requires_teacher(small_student):
    batch = make_batch(Rng(5), small_student.config.vocab_size, 2, 6)
    opt = Adam(small_student.named_parameters(), lr=1e-3)
    with pytest.raises(ValueError):
        train_step(small_student, None, batch, DistillWeights.kd_only(), opt)


def test_non_finite_loss_names_component(small_teacher, small_student):
    student = small_student.copy()
    student.pos_emb[0, 0] = np.nan
    batch = make_batch(Rng(6), student.config.vocab_size, 1, 4)
    opt = Adam(student.named_parameters(), lr=1e-3)
    with pytest.raises(NonFiniteLossError, match="L_"):
        train_step(student, small_teacher, batch, DistillWeights.pretrain(), opt)


def test_sample_batch_shapes_and_determinism():
    tokens = np.arange(1000) % 256
    b1 = sample_batch(tokens, 4, 16, Rng(7))
    b2 = sample_batch(tokens, 4, 16, Rng(7))
    assert b1.shape == (4, 17)
    assert np.array_equal(b1, b2)
    with pytest.raises(ShapeError):
        sample_batch(np.arange(4), 1, 16, Rng(0))


def test_run_phase_none_and_metrics_file(tmp_path, small_teacher, small_student):
    tokens = Rng(8).integers(0, 16, size=4000).astype(np.int64)
    cfg = TrainConfig(batch_size=2, learning_rate=1e-3, epochs=1, seed=9, seq_len=8)
    assert run_phase("none", small_student, small_teacher, tokens, cfg) == []

    path = tmp_path / "metrics.jsonl"
    hist = run_phase("lm", small_student.copy(), None, tokens, cfg,
                     metrics_path=path, steps_per_epoch=5)
    assert len(hist) == 5
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 5
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "L_emb", "L_att", "L_hid", "L_ce", "L_total", "wall_ms"}


def test_run_phase_deterministic_metrics(small_teacher, small_student):
    tokens = Rng(10).integers(0, 16, size=4000).astype(np.int64)
    cfg = TrainConfig(batch_size=2, learning_rate=1e-3, epochs=1, seed=11, seq_len=8)

    def run():
        s = small_student.copy()
        hist = run_phase("lm+kd", s, small_teacher, tokens, cfg, steps_per_epoch=4)
        return [(m.L_emb, m.L_att, m.L_hid, m.L_ce, m.L_total) for m in hist], s.state_hash()

    r1, r2 = run(), run()
    assert r1 == r2


def test_finetune_step_descends_and_freezes_teacher(small_teacher, small_student):
    rng = Rng(12)
    teacher_clf = attach_classifier(small_teacher, 2, rng=Rng(1))
    student_clf = attach_classifier(small_student, 2, rng=Rng(1))
    seqs = [rng.integers(0, 16, size=6).astype(np.int64) for _ in range(4)]
    labels = np.array([0, 1, 0, 1])
    opt = Adam(student_clf.named_parameters(), lr=1e-3)
    h0 = teacher_clf.state_hash()
    w = DistillWeights.finetune()
    losses = [
        finetune_step(student_clf, teacher_clf, seqs, labels, w, opt, step_index=i).L_total
        for i in range(20)
    ]
    assert losses[-1] < losses[0]
    assert teacher_clf.state_hash() == h0


def test_evaluate_lm_and_perplexity(small_teacher):
    tokens = Rng(13).integers(0, 16, size=600).astype(np.int64)
    ce = evaluate_lm(small_teacher, tokens, seq_len=8)
    assert np.isfinite(ce) and ce > 0
    assert abs(perplexity(ce) - np.exp(ce)) < 1e-9
    with pytest.raises(ShapeError):
        evaluate_lm(small_teacher, tokens[:4], seq_len=8)
