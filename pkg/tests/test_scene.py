import math

import numpy as np
import pytest

from benthic.kinematics import Pose
from benthic.scene import (
    Heightfield,
    OutOfBounds,
    RevisionMismatch,
    SceneGraph,
    SceneObject,
    TERRAIN_ID,
    apply_delta,
    box,
    cylinder,
    encode_delta,
    patch_terrain,
    quantize_pose,
    raycast,
    ray_shape_distance,
    remove_object,
    sphere,
    surface_normal,
    upsert_object,
)
from benthic.scenewire import (
    decode_delta_bytes,
    decode_snapshot_bytes,
    encode_delta_bytes,
    encode_snapshot_bytes,
)
from benthic.transforms import quat_from_axis_angle, relative_angle


def flat_terrain(z=0.0, n=11, cell=1.0, origin=(-5.0, -5.0)):
    return Heightfield(origin, cell, np.full((n, n), z))


def empty_graph(**kw):
    return SceneGraph(terrain=flat_terrain(**kw))


def obj(oid, label="marker", pos=(0, 0, 0), shape=None, conf=1.0, quat=(1, 0, 0, 0)):
    return SceneObject(oid, label, Pose(np.array(pos, float), np.array(quat, float)), shape or sphere(0.1), conf)


class TestUpsert:
    def test_insert_into_empty(self):
        g = upsert_object(empty_graph(), obj(1))
        assert len(g.objects) == 1
        assert g.revision == 1

    def test_upsert_same_id_twice(self):
        g = upsert_object(empty_graph(), obj(1, pos=(0, 0, 0)))
        g = upsert_object(g, obj(1, pos=(1, 0, 0)))
        assert len(g.objects) == 1
        assert g.revision == 2
        np.testing.assert_array_equal(g.get(1).pose.position, [1, 0, 0])

    def test_bad_confidence_rejected(self):
        with pytest.raises(ValueError):
            obj(1, conf=1.2)

    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            sphere(-1.0)


class TestRaycast:
    def test_straight_down_onto_flat_terrain(self):
        hit = raycast(empty_graph(), [0, 0, 10], [0, 0, -1])
        assert hit.object_id == TERRAIN_ID
        np.testing.assert_allclose(hit.point, [0, 0, 0], atol=1e-9)
        assert hit.distance == pytest.approx(10.0, abs=1e-9)

    def test_miss(self):
        assert raycast(empty_graph(), [0, 0, 10], [0, 0, 1]) is None

    def test_sphere_hit(self):
        g = upsert_object(empty_graph(), obj(1, pos=(0, 0, 0), shape=sphere(1.0)))
        hit = raycast(g, [0, 0, 5], [0, 0, -1])
        assert hit.object_id == 1
        np.testing.assert_allclose(hit.point, [0, 0, 1], atol=1e-9)
        assert hit.distance == pytest.approx(4.0, abs=1e-9)

    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError):
            raycast(empty_graph(), [0, 0, 10], [0, 0, -2])

    def test_box_hit(self):
        g = upsert_object(empty_graph(), obj(1, pos=(0, 0, 1.0), shape=box(2.0, 2.0, 1.0)))
        hit = raycast(g, [0, 0, 5], [0, 0, -1])
        assert hit.object_id == 1
        assert hit.point[2] == pytest.approx(1.5, abs=1e-9)

    def test_cylinder_side_hit(self):
        g = upsert_object(empty_graph(), obj(1, pos=(0, 0, 2.0), shape=cylinder(0.5, 1.0)))
        hit = raycast(g, [5, 0, 2], [-1, 0, 0])
        assert hit.object_id == 1
        assert hit.distance == pytest.approx(4.5, abs=1e-9)

    def test_nearest_hit_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(17)
        g = empty_graph()
        shapes = [sphere(0.3), box(0.5, 0.4, 0.3), cylinder(0.25, 0.6)]
        for i in range(12):
            axis = rng.normal(size=3)
            q = quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(0, math.pi))
            g = upsert_object(
                g, obj(i, pos=rng.uniform(-3, 3, 3) + [0, 0, 3], shape=shapes[i % 3], quat=q)
            )
        for _ in range(200):
            origin = rng.uniform(-4, 4, 3) + [0, 0, 6]
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            hit = raycast(g, origin, d)
            # oracle: min over per-object distances, terrain ignored when above and pointing up
            ts = []
            for o in g.objects:
                t = ray_shape_distance(origin, d, o)
                if t is not None:
                    ts.append((t, o.id))
            if hit is not None and hit.object_id != TERRAIN_ID:
                t_best, id_best = min(ts)
                assert hit.object_id == id_best
                assert hit.distance == pytest.approx(t_best, abs=1e-9)
            elif ts:
                # objects were hit but terrain was closer
                assert hit is not None and hit.object_id == TERRAIN_ID
                assert hit.distance <= min(ts)[0] + 1e-6


class TestSurfaceNormal:
    def test_flat(self):
        n = surface_normal(flat_terrain(), 0.3, -0.7)
        np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)

    def test_tilted_plane_45deg(self):
        # z = x: 45 degrees about y; analytic normal (-sqrt2/2, 0, sqrt2/2)
        grid = np.tile(np.linspace(-5, 5, 11), (11, 1))
        t = Heightfield((-5, -5), 1.0, grid)
        n = surface_normal(t, 0.2, 0.4)
        s = math.sqrt(2) / 2
        np.testing.assert_allclose(n, [-s, 0, s], atol=1e-9)

    def test_unit_norm(self):
        rng = np.random.default_rng(2)
        t = Heightfield((-5, -5), 1.0, rng.uniform(-1, 1, (11, 11)))
        for _ in range(50):
            x, y = rng.uniform(-4.9, 4.9, 2)
            assert np.linalg.norm(surface_normal(t, x, y)) == pytest.approx(1.0, abs=1e-9)

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            surface_normal(flat_terrain(), 100.0, 0.0)


def random_mutations(g, rng, steps):
    for _ in range(steps):
        r = rng.integers(0, 4)
        if r == 0 or not g.objects:
            g = upsert_object(g, obj(int(rng.integers(0, 20)), pos=rng.uniform(-3, 3, 3)))
        elif r == 1:
            victim = g.objects[rng.integers(0, len(g.objects))]
            g = remove_object(g, victim.id)
        elif r == 2:
            victim = g.objects[rng.integers(0, len(g.objects))]
            g = upsert_object(g, obj(victim.id, pos=rng.uniform(-3, 3, 3)))
        else:
            g = patch_terrain(g, int(rng.integers(0, 8)), int(rng.integers(0, 8)), rng.uniform(-1, 1, (2, 2)))
    return g


def graphs_equal_up_to_quantization(a, b):
    if {o.id for o in a.objects} != {o.id for o in b.objects}:
        return False
    for oa in a.objects:
        ob = b.get(oa.id)
        if oa.label != ob.label or oa.shape.kind != ob.shape.kind:
            return False
        if not np.allclose(oa.shape.dims, ob.shape.dims, rtol=1e-6):
            return False
        if np.max(np.abs(oa.pose.position - ob.pose.position)) > 1.01e-3:
            return False
        if relative_angle(oa.pose.orientation, ob.pose.orientation) > 2e-3:
            return False
    return np.allclose(a.terrain.grid, b.terrain.grid, atol=1e-5)


class TestDelta:
    def test_identical_graphs_empty_delta(self):
        g = upsert_object(empty_graph(), obj(1))
        d = encode_delta(g, g)
        assert d.empty

    def test_single_move_lists_one_id(self):
        g1 = upsert_object(empty_graph(), obj(1))
        g1 = upsert_object(g1, obj(2))
        g2 = upsert_object(g1, obj(2, pos=(1, 1, 1)))
        d = encode_delta(g1, g2)
        assert [o.id for o in d.changed] == [2]
        assert d.removed == ()

    def test_revision_mismatch_on_apply(self):
        g1 = upsert_object(empty_graph(), obj(1))
        g2 = upsert_object(g1, obj(2))
        d = encode_delta(g1, g2)
        with pytest.raises(RevisionMismatch):
            apply_delta(g2, d)

    def test_round_trip_randomized(self):
        rng = np.random.default_rng(23)
        for _ in range(60):
            base = random_mutations(empty_graph(), rng, int(rng.integers(0, 6)))
            target = random_mutations(base, rng, int(rng.integers(1, 10)))
            d = encode_delta(base, target)
            rebuilt = apply_delta(base, d)
            assert rebuilt.revision == target.revision
            assert graphs_equal_up_to_quantization(rebuilt, target)

    def test_wire_round_trip_and_size(self):
        rng = np.random.default_rng(29)
        for _ in range(40):
            base = random_mutations(empty_graph(), rng, int(rng.integers(0, 6)))
            target = random_mutations(base, rng, int(rng.integers(1, 8)))
            d = encode_delta(base, target)
            wire = encode_delta_bytes(d)
            d2 = decode_delta_bytes(wire)
            rebuilt = apply_delta(base, d2)
            assert graphs_equal_up_to_quantization(rebuilt, target)
            assert len(wire) <= len(encode_snapshot_bytes(target))

    def test_snapshot_round_trip(self):
        rng = np.random.default_rng(31)
        g = random_mutations(empty_graph(), rng, 10)
        g2 = decode_snapshot_bytes(encode_snapshot_bytes(g))
        assert g2.revision == g.revision
        assert graphs_equal_up_to_quantization(g, g2)


class TestQuantization:
    def test_pose_quantization_error_bounds(self):
        rng = np.random.default_rng(37)
        for _ in range(200):
            axis = rng.normal(size=3)
            q = quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(0, math.pi))
            p = Pose(rng.uniform(-10, 10, 3), q)
            pq = quantize_pose(p)
            assert np.max(np.abs(p.position - pq.position)) <= 0.5e-3 + 1e-12
            assert relative_angle(p.orientation, pq.orientation) <= 1.5e-3
