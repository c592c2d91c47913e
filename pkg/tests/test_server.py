import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ivseg import expert, metrics, nn
from ivseg.server import create_app
from ivseg.synth import make_sample
from ivseg.trainer import (
    TAG_INIT_CONF,
    TAG_INIT_SEG,
    TrainConfig,
    derived_rng,
    eval_episode_rng,
    evaluate,
    load_training_checkpoint,
    save_training_checkpoint,
    _init_adam,
)
from ivseg.volume import write_volume

SHAPE = (10, 10, 6)


def small_cfg():
    return TrainConfig(
        epochs=1, seed=17, checkpoint_every=0,
        seg_shared_widths=(2, 2, 4), seg_head_widths=(2, 2),
        conf_widths=(2, 2, 2, 2, 2, 2),
    )


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    # an untrained (initialized) checkpoint plus one labeled volume on disk
    tmp = tmp_path_factory.mktemp("server")
    cfg = small_cfg()
    seg = nn.xavier_init(cfg.seg_spec(), derived_rng(cfg.seed, TAG_INIT_SEG))
    conf = nn.xavier_init(cfg.conf_spec(), derived_rng(cfg.seed, TAG_INIT_CONF))
    adam_seg, adam_conf = _init_adam(seg, conf, cfg.seg_spec(), cfg.lr)
    ckpt = tmp / "init.ckpt"
    save_training_checkpoint(ckpt, seg, conf, adam_seg, adam_conf, cfg, 0)
    sample = make_sample(33, 0, SHAPE)
    write_volume(sample.image, tmp / "vol", role="image")
    write_volume(sample.label.astype(np.float32), tmp / "lab", role="mask")
    return {"tmp": tmp, "ckpt": ckpt, "cfg": cfg, "sample": sample,
            "volume": str(tmp / "vol.json"), "label": str(tmp / "lab.json")}


@pytest.fixture()
def client():
    return TestClient(create_app())


def create_session(client, artifacts, with_label=True):
    body = {"volume": artifacts["volume"], "checkpoint": str(artifacts["ckpt"])}
    if with_label:
        body["label"] = artifacts["label"]
    r = client.post("/sessions", json=body)
    assert r.status_code == 201, r.text
    return r.json()["id"]


def test_create_and_initial_state(client, artifacts):
    sid = create_session(client, artifacts)
    r = client.get(f"/sessions/{sid}")
    state = r.json()
    assert state["step"] == 0 and state["shape"] == list(SHAPE)
    assert state["hint_count"] == 0 and not state["busy"]
    # probability slice is constant 0.5 at step 0
    r = client.get(f"/sessions/{sid}/slice", params={"plane": "z", "index": 3, "layer": "prob"})
    assert r.status_code == 200
    rows, cols = np.frombuffer(r.content[:8], "<u4")
    grid = np.frombuffer(r.content[8:], "<f4").reshape(rows, cols)
    assert (grid == 0.5).all()
    assert (rows, cols) == (SHAPE[1], SHAPE[2])


def test_sessions_are_isolated(client, artifacts):
    a = create_session(client, artifacts)
    b = create_session(client, artifacts)
    assert a != b
    client.post(f"/sessions/{a}/hints", json={"points": [[1, 1, 1]]})
    client.post(f"/sessions/{a}/step")
    ra = client.get(f"/sessions/{a}").json()
    rb = client.get(f"/sessions/{b}").json()
    assert ra["step"] == 1 and rb["step"] == 0
    assert rb["hint_count"] == 0


def test_image_slice_roundtrips_bitwise(client, artifacts):
    sid = create_session(client, artifacts)
    image = artifacts["sample"].image
    for plane, axis in (("z", 0), ("y", 1), ("x", 2)):
        idx = image.shape[axis] // 2
        r = client.get(f"/sessions/{sid}/slice",
                       params={"plane": plane, "index": idx, "layer": "image"})
        grid = np.frombuffer(r.content[8:], "<f4")
        want = np.take(image, idx, axis=axis).ravel()
        assert grid.tobytes() == want.astype("<f4").tobytes()


def test_conf_slice_in_open_unit_interval(client, artifacts):
    sid = create_session(client, artifacts)
    r = client.get(f"/sessions/{sid}/slice", params={"plane": "z", "index": 0, "layer": "conf"})
    grid = np.frombuffer(r.content[8:], "<f4")
    assert grid.min() > 0.0 and grid.max() < 1.0


def test_bad_requests(client, artifacts):
    sid = create_session(client, artifacts)
    assert client.get(f"/sessions/{sid}/slice",
                      params={"plane": "q", "index": 0, "layer": "image"}).status_code == 400
    assert client.get(f"/sessions/{sid}/slice",
                      params={"plane": "z", "index": 99, "layer": "image"}).status_code == 400
    assert client.post(f"/sessions/{sid}/hints",
                       json={"points": [[99, 0, 0]]}).status_code == 400
    assert client.post("/sessions/nope/step").status_code == 404
    r = client.post("/sessions", json={"volume": "missing.json",
                                       "checkpoint": str(artifacts["ckpt"])})
    assert r.status_code == 404


def test_create_rejects_corrupt_checkpoint(client, artifacts, tmp_path):
    from ivseg.volume import load_checkpoint, save_checkpoint

    tensors, meta = load_checkpoint(artifacts["ckpt"])
    victim = next(k for k in tensors if k.endswith(".w"))
    tensors[victim] = tensors[victim].reshape(-1)[:-1]
    bad = tmp_path / "bad.ckpt"
    save_checkpoint(bad, tensors, meta)
    r = client.post("/sessions", json={"volume": artifacts["volume"],
                                       "checkpoint": str(bad)})
    assert r.status_code == 400


def test_duplicate_hints_idempotent_map(client, artifacts):
    sid = create_session(client, artifacts)
    r1 = client.post(f"/sessions/{sid}/hints", json={"points": [[2, 2, 2]]})
    assert r1.status_code == 200
    client.post(f"/sessions/{sid}/step")
    r = client.get(f"/sessions/{sid}/slice", params={"plane": "z", "index": 2, "layer": "hint"})
    grid1 = np.frombuffer(r.content[8:], "<f4").copy()
    client.post(f"/sessions/{sid}/hints", json={"points": [[2, 2, 2]]})
    client.post(f"/sessions/{sid}/step")
    r = client.get(f"/sessions/{sid}/slice", params={"plane": "z", "index": 2, "layer": "hint"})
    grid2 = np.frombuffer(r.content[8:], "<f4")
    assert np.array_equal(grid1, grid2)
    # empty submission is a no-op success
    assert client.post(f"/sessions/{sid}/hints", json={"points": []}).status_code == 200


def test_step_reports_and_suggestions(client, artifacts):
    sid = create_session(client, artifacts)
    r = client.post(f"/sessions/{sid}/step")
    body = r.json()
    assert body["step"] == 1
    assert len(body["suggestions"]) == min(5, len(body["suggestions"]) or 5)
    r2 = client.post(f"/sessions/{sid}/step")
    assert r2.json()["step"] == 2
    history = client.get(f"/sessions/{sid}/metrics").json()["history"]
    assert [h["step"] for h in history] == [1, 2]
    sugg = client.get(f"/sessions/{sid}/suggestions").json()["suggestions"]
    assert sugg == r2.json()["suggestions"]
    assert len(sugg) == 5
    # suggestions slice carries exactly the suggested region ids
    r3 = client.get(f"/sessions/{sid}/slice",
                    params={"plane": "z", "index": 0, "layer": "suggestions"})
    assert r3.headers["x-dtype"] == "i32"
    grid = np.frombuffer(r3.content[8:], "<i4")
    ids = {s["label"] for s in sugg}
    assert set(np.unique(grid)) <= ids | {-1}


def test_busy_session_conflicts(artifacts):
    app = create_app()
    client = TestClient(app)
    sid = create_session(client, artifacts)
    entry = app.state.sessions[sid]
    assert entry.lock.acquire(blocking=False)
    try:
        assert client.post(f"/sessions/{sid}/step").status_code == 409
        assert client.post(f"/sessions/{sid}/hints",
                           json={"points": [[0, 0, 0]]}).status_code == 409
        assert client.get(f"/sessions/{sid}").json()["busy"] is True
    finally:
        entry.lock.release()
    assert client.post(f"/sessions/{sid}/step").status_code == 200


def test_delete_session(client, artifacts):
    sid = create_session(client, artifacts)
    assert client.delete(f"/sessions/{sid}").status_code == 204
    assert client.get(f"/sessions/{sid}").status_code == 404


def test_api_engine_equivalence(client, artifacts):
    """Driving the server with the simulated expert reproduces evaluate()."""
    cfg = artifacts["cfg"]
    sample = artifacts["sample"]
    seg, conf, _, _, cfg2, _ = load_training_checkpoint(artifacts["ckpt"])
    reports, _ = evaluate(seg, cfg2.seg_spec(), conf, cfg2.conf_spec(), [sample],
                          cfg2, seed=123)
    want = reports[0]

    sid = create_session(client, artifacts)
    rng = eval_episode_rng(123, 0)
    prob = np.full(SHAPE, 0.5, np.float32)
    got = []
    for t in range(cfg.episode.T):
        k = cfg.schedule.points_per_step[t]
        pred = metrics.binarize(prob)
        points = expert.select_hints(sample.label, pred, k, rng,
                                     cfg.schedule.perturb_radius)
        r = client.post(f"/sessions/{sid}/hints",
                        json={"points": [[p.z, p.y, p.x] for p in points]})
        assert r.status_code == 200
        r = client.post(f"/sessions/{sid}/step")
        assert r.status_code == 200
        got.append(r.json()["report"])
        # rebuild the probability volume from slices for the next hint round
        slices = []
        for z in range(SHAPE[0]):
            rs = client.get(f"/sessions/{sid}/slice",
                            params={"plane": "z", "index": z, "layer": "prob"})
            slices.append(np.frombuffer(rs.content[8:], "<f4").reshape(SHAPE[1], SHAPE[2]))
        prob = np.stack(slices)

    for t, rep in enumerate(want):
        g = got[t]
        assert g["step"] == rep.step
        assert g["dice"] == rep.dice
        assert (g["assd"] is None) == (rep.assd is None)
        if rep.assd is not None:
            assert g["assd"] == rep.assd
        assert g["misunderstanding_rate"] == rep.misunderstanding_rate
        assert g["reward_sum"] == pytest.approx(rep.reward_sum, abs=0)
