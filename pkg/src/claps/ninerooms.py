"""The stochastic nine-rooms navigation benchmark and its explicit room graph."""

from __future__ import annotations

import csv

from .absgraph import AbstractGraph
from .composition import edge_task
from .config import Settings, bundled, load_settings
from .spectrl import Box, Region

__all__ = ["room_name", "parse_room", "room_center", "room_box", "wall_boxes", "load_nine_rooms",
           "nine_rooms", "edge_region", "read_edge_table", "nine_rooms_graph",
           "table2_probabilities", "edge_task", "single_edge_graph"]

DEFAULT_CONFIG = "nine_rooms.ini"
TABLE2 = "table2_edges.csv"


def room_name(x: int, y: int) -> str:
    return f"({x},{y})"


def parse_room(name: str) -> tuple[int, int]:
    x, y = name.strip().strip("()").split(",")
    return int(x), int(y)


def room_center(x: int, y: int) -> Region:
    return Region.of(Box((0.4 + x, 0.4 + y), (0.6 + x, 0.6 + y)))


def room_box(x: int, y: int) -> Box:
    return Box((float(x), float(y)), (x + 1.0, y + 1.0))


def wall_boxes(doors: set[tuple[tuple[int, int], tuple[int, int]]], thickness: float = 0.1,
               door_width: float = 0.5, rooms: int = 3) -> list[Box]:
    """Walls of thickness ``thickness`` on interior room boundaries with centred doors."""
    t = thickness / 2
    lo_d, hi_d = 0.5 - door_width / 2, 0.5 + door_width / 2
    out = []

    def has_door(a, b):
        return (a, b) in doors or (b, a) in doors

    for i in range(rooms - 1):
        for j in range(rooms):
            x = i + 1.0
            if has_door((i, j), (i + 1, j)):
                out += [Box((x - t, j), (x + t, j + lo_d)), Box((x - t, j + hi_d), (x + t, j + 1.0))]
            else:
                out.append(Box((x - t, j), (x + t, j + 1.0)))
    for i in range(rooms):
        for j in range(rooms - 1):
            y = j + 1.0
            if has_door((i, j), (i, j + 1)):
                out += [Box((i, y - t), (i + lo_d, y + t)), Box((i + hi_d, y - t), (i + 1.0, y + t))]
            else:
                out.append(Box((i, y - t), (i + 1.0, y + t)))
    return out


def load_nine_rooms(path=None) -> Settings:
    return load_settings(path or bundled(DEFAULT_CONFIG))


def nine_rooms(path=None):
    """(system, task, walls, room-center grid) for the bundled or given config.

    ``centers[x][y]`` is the subgoal region of room (x, y).
    """
    st = load_nine_rooms(path)
    walls = st.regions["walls"]
    centers = [[room_center(x, y) for y in range(3)] for x in range(3)]
    return st.system, st.task, [Region.of(b) for b in walls.boxes], centers


def edge_region(start: tuple[int, int], goal: tuple[int, int], walls: Region, space: Box) -> Region:
    """Rooms spanned by the start and goal rooms, minus the walls."""
    lo = (min(start[0], goal[0]), min(start[1], goal[1]))
    hi = (max(start[0], goal[0]) + 1.0, max(start[1], goal[1]) + 1.0)
    rect = Region.of(Box((float(lo[0]), float(lo[1])), hi))
    return rect.intersect(walls.complement_within(space))


def read_edge_table(path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append((r["start"].strip(), r["goal"].strip(), float(r["probability"])))
    return rows


def nine_rooms_graph(settings: Settings | None = None, edges_path=None) -> AbstractGraph:
    """Room graph with one vertex per room center and the benchmark's edge list."""
    st = settings or load_nine_rooms()
    space = st.system.state_space
    walls = st.regions["walls"]
    if edges_path is None:
        edges_path = st.resolve(st.graph.get("edges", TABLE2)) if st.graph else bundled(TABLE2)
    table = read_edge_table(edges_path)
    names = [room_name(x, y) for y in range(3) for x in range(3)]
    vregion = {n: room_center(*parse_room(n)) for n in names}
    source = st.graph.get("source", "(0,0)") if st.graph else "(0,0)"
    target = st.graph.get("target", "(2,2)") if st.graph else "(2,2)"
    if st.task is not None:
        vregion[source] = st.task.initial
    edges = [(s, g) for s, g, _ in table]
    eregion = {(s, g): edge_region(parse_room(s), parse_room(g), walls, space) for s, g in edges}
    labels = {n: f"room {n}" for n in names}
    return AbstractGraph(tuple(names), tuple(edges), vregion, eregion, source, target, labels)


def table2_probabilities(path=None) -> dict[tuple[str, str], float]:
    return {(s, g): p for s, g, p in read_edge_table(path or bundled(TABLE2))}


def single_edge_graph(G: AbstractGraph, edge) -> AbstractGraph:
    """Two-vertex graph keeping one edge of ``G`` (the reduced desk-scale instance)."""
    v, w = edge
    return AbstractGraph((v, w), ((v, w),), {v: G.vertex_regions[v], w: G.vertex_regions[w]},
                         {(v, w): G.edge_regions[(v, w)]}, v, w,
                         {v: G.labels.get(v, v), w: G.labels.get(w, w)})
