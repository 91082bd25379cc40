import pytest

from sqlscout.actions import Action, ActionKind, QueryState
from sqlscout.explorer import (
    EMPTY_RESULT,
    EXECUTION_ERROR,
    SUCCESS,
    SYNTAX_ERROR,
    ExplorationConfig,
    ExplorationStats,
    ExplorationTree,
    SchemaView,
    SimulationOutcome,
    backpropagate,
    enumerate_legal_actions,
    fragment_of,
    run_exploration,
    select_and_expand,
    simulate,
)
from sqlscout.gateway import BackendUnavailable, FunctionBackend, Gateway, RequestKind, ScriptedBackend
from sqlscout.knowledge_base import KnowledgeBase, load_kb
from sqlscout.offline import OfflinePolicy, describe_state, render_state_sql
from sqlscout.schema_graph import graph_from_catalog, introspect_catalog
from sqlscout.sql_exec import Executor, ResultClass, classify

U = "shop.main.users"
O = "shop.main.orders"

TWO_TABLES = """
CREATE TABLE users (user_id INTEGER PRIMARY KEY, age INTEGER, gender TEXT, city TEXT);
CREATE TABLE orders (order_id INTEGER PRIMARY KEY, customer_id INTEGER REFERENCES users(user_id), amount REAL, region TEXT);
INSERT INTO users VALUES (1, 25, 'Male', 'Boston'), (2, 31, 'Female', 'Denver'), (3, 44, 'Male', 'Austin'), (4, 52, 'Female', 'Boston');
INSERT INTO orders VALUES (1, 1, 10.5, 'East'), (2, 2, 20.0, 'West'), (3, 3, 30.25, 'East'), (4, 1, 40.0, 'North'), (5, 4, 12.0, 'West');
"""


def sel(c):
    return Action(ActionKind.SELECT_UNUSED_COLUMN, (c,))


def state_of(*actions):
    s = QueryState()
    for a in actions:
        s = s.extend(a)
    return s


def gw(fn):
    return Gateway(FunctionBackend(fn))


@pytest.fixture
def two_db(tmp_path):
    path = tmp_path / "two.sql"
    path.write_text(TWO_TABLES)
    graph = graph_from_catalog(introspect_catalog(str(path)))
    ex = Executor(str(path))
    yield graph, ex
    ex.close()


# -- legal actions -------------------------------------------------------------


def test_root_offers_only_select_and_join(shop_graph):
    kinds = {a.kind for a in enumerate_legal_actions(QueryState(), shop_graph)}
    assert kinds == {ActionKind.SELECT_UNUSED_COLUMN, ActionKind.INTRODUCE_JOIN}


def test_group_by_unlocks_having(shop_graph):
    s = state_of(sel(f"{U}.city"), sel(f"{U}.age"), Action(ActionKind.APPLY_AGGREGATION, ("AVG", f"{U}.age")))
    assert ActionKind.ADD_HAVING not in {a.kind for a in enumerate_legal_actions(s, shop_graph)}
    s = s.extend(Action(ActionKind.ADD_GROUP_BY, (f"{U}.city",)))
    having = [a for a in enumerate_legal_actions(s, shop_graph) if a.kind is ActionKind.ADD_HAVING]
    assert having == [Action(ActionKind.ADD_HAVING, ("AVG", f"{U}.age", ">"))]


def test_aggregation_needs_a_selected_column(shop_graph):
    s = state_of(Action(ActionKind.INTRODUCE_JOIN, (O, U, f"{O}.customer_id", f"{U}.user_id")))
    kinds = {a.kind for a in enumerate_legal_actions(s, shop_graph)}
    assert ActionKind.APPLY_AGGREGATION not in kinds and ActionKind.ADD_ORDERING not in kinds


def test_only_key_columns_remain_selectable(shop_graph):
    view = SchemaView(shop_graph)
    non_key = [c.id for c in view.tables[U].columns if not c.is_key]
    s = state_of(*[sel(c) for c in non_key])
    offered = [a.args[0] for a in enumerate_legal_actions(s, view) if a.kind is ActionKind.SELECT_UNUSED_COLUMN]
    assert offered and all(view.columns[c].is_key for c in offered)
    assert f"{U}.user_id" in offered


def test_selected_key_column_not_offered_twice(shop_graph):
    s = state_of(sel(f"{U}.user_id"))
    offered = [a.args[0] for a in enumerate_legal_actions(s, shop_graph) if a.kind is ActionKind.SELECT_UNUSED_COLUMN]
    assert f"{U}.user_id" not in offered


def test_joins_reach_unjoined_neighbours_only(shop_graph):
    s = state_of(sel(f"{U}.age"))
    joins = [a for a in enumerate_legal_actions(s, shop_graph) if a.kind is ActionKind.INTRODUCE_JOIN]
    assert joins and all(a.args[0] == U and a.args[1] != U for a in joins)


# -- selection / expansion ----------------------------------------------------------


def test_first_action_policy_grows_leftmost_chain(shop_graph):
    tree = ExplorationTree()
    policy = Gateway(OfflinePolicy(None))
    first = enumerate_legal_actions(QueryState(), shop_graph)[0]
    nodes = [select_and_expand(tree, shop_graph, policy) for _ in range(4)]
    assert [n.id for n in nodes] == ["n1", "n2", "n3", "n4"]
    assert [n.parent for n in nodes] == ["n0", "n1", "n2", "n3"]
    assert nodes[0].state.actions == (first,)
    for n in nodes[1:]:
        parent = tree.nodes[n.parent]
        assert n.state.actions[:-1] == parent.state.actions
        assert n.state.actions[-1] == enumerate_legal_actions(parent, shop_graph)[0]


def test_excluded_node_never_offered(shop_graph):
    tree = ExplorationTree()
    policy = Gateway(OfflinePolicy(None))
    n1 = select_and_expand(tree, shop_graph, policy)
    n2 = select_and_expand(tree, shop_graph, policy)
    n1.failure_count = 3
    seen = []
    for _ in range(6):
        select_and_expand(tree, shop_graph, policy, ExplorationConfig(), observer=seen.append)
    offered = {nid for ids in seen for nid in ids}
    assert "n1" not in offered and n2.id not in offered
    new = [n for nid, n in tree.nodes.items() if nid not in ("n0", "n1", "n2")]
    assert len(new) == 6 and all("n1" not in {p.id for p in tree.path(n)} for n in new)


def test_illegal_reply_retried_once_then_skipped(shop_graph):
    tree = ExplorationTree()
    policy = gw(lambda r: "SelectUnusedColumn users.no_such_column")
    stats = ExplorationStats()
    assert select_and_expand(tree, shop_graph, policy, stats=stats) is None
    assert policy.llm_call_count == 2
    assert stats.policy_faults == 2 and stats.skipped_steps == 1
    assert tree.root.failure_count == 1 and len(tree) == 1


def test_illegal_then_legal_reply(shop_graph):
    replies = iter(["DROP TABLE users", "SelectUnusedColumn users.age"])
    tree = ExplorationTree()
    policy = gw(lambda r: next(replies))
    stats = ExplorationStats()
    child = select_and_expand(tree, shop_graph, policy, stats=stats)
    assert child.state.actions == (sel(f"{U}.age"),)
    assert stats.policy_faults == 1 and stats.skipped_steps == 0


def test_unknown_node_prefix_is_a_fault(shop_graph):
    tree = ExplorationTree()
    policy = gw(lambda r: "n99: SelectUnusedColumn users.age")
    assert select_and_expand(tree, shop_graph, policy) is None


def test_action_selection_payload(shop_graph):
    seen = []

    def policy(req):
        seen.append(req.payload)
        return "SelectUnusedColumn users.age"

    select_and_expand(ExplorationTree(), shop_graph, gw(policy))
    p = seen[0]
    assert p["candidates"][0]["node"] == "n0" and p["candidates"][0]["path"] == ["n0"]
    assert "age INTEGER -- user age in years" in p["schema_context"][U]


# -- simulation ---------------------------------------------------------------------


def scripted(sql, description="d"):
    return Gateway(ScriptedBackend([("SqlCompletion", sql), ("NlDescription", description)]))


def node_with(tree, *actions):
    node = tree.root
    for a in actions:
        node = tree.add_child(node, a)
    return node


def test_simulate_running_example(shop_graph, shop_exec):
    tree = ExplorationTree()
    node = node_with(tree, sel(f"{U}.age"), sel(f"{U}.height"), sel(f"{U}.gender"))
    policy = scripted("SELECT * FROM users WHERE age > 20 AND gender = 'Male';", "Find all male users older than 20.")
    out = simulate(node, shop_graph, policy, shop_exec)
    assert out.status == SUCCESS
    assert out.sql == "SELECT * FROM users WHERE age > 20 AND gender = 'Male';"
    assert out.description == "Find all male users older than 20."
    assert out.fragment.columns == [f"{U}.age", f"{U}.height", f"{U}.gender"]


def test_simulate_syntax_error_skips_execution(shop_graph, shop_exec):
    node = node_with(ExplorationTree(), sel(f"{U}.age"))
    before = shop_exec.db_call_count
    out = simulate(node, shop_graph, scripted("SELECT (age FROM users"), shop_exec)
    assert out.status == SYNTAX_ERROR and shop_exec.db_call_count == before


def test_simulate_execution_error(shop_graph, shop_exec):
    node = node_with(ExplorationTree(), sel(f"{U}.age"))
    out = simulate(node, shop_graph, scripted("SELECT nope FROM users"), shop_exec)
    assert out.status == EXECUTION_ERROR


def test_simulate_timeout(shop_graph):
    ex = Executor("fixture:shop", timeout=0.2)
    node = node_with(ExplorationTree(), sel(f"{U}.age"))
    sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c"
    out = simulate(node, shop_graph, scripted(sql), ex)
    assert out.status == EXECUTION_ERROR and out.error_detail == "timeout"


def test_simulate_empty_table(tmp_path):
    path = tmp_path / "empty.sql"
    path.write_text("CREATE TABLE things (thing_id INTEGER PRIMARY KEY, label TEXT);")
    graph = graph_from_catalog(introspect_catalog(str(path)))
    ex = Executor(str(path))
    col = next(iter(SchemaView(graph).tables.values())).columns[1].id
    node = node_with(ExplorationTree(), sel(col))
    out = simulate(node, graph, scripted("SELECT label FROM things"), ex)
    assert out.status == EMPTY_RESULT and out.description is None


def test_description_only_after_validation(shop_graph, shop_exec):
    backend = ScriptedBackend([("SqlCompletion", "SELECT * FROM users WHERE age > 1000")])
    node = node_with(ExplorationTree(), sel(f"{U}.age"))
    out = simulate(node, shop_graph, Gateway(backend), shop_exec)
    assert out.status == EMPTY_RESULT


def test_success_outcome_requires_sql_and_description():
    with pytest.raises(ValueError):
        SimulationOutcome(SUCCESS, sql="SELECT 1")


# -- backpropagation ----------------------------------------------------------------


def success(node, view, sql):
    return SimulationOutcome(SUCCESS, sql=sql, description="d", fragment=fragment_of(node.state, view))


def test_success_at_depth_three(shop_graph):
    graph = graph_from_catalog(introspect_catalog("fixture:shop"))
    view = SchemaView(graph)
    tree = ExplorationTree()
    node = node_with(tree, sel(f"{U}.age"), sel(f"{U}.city"), Action(ActionKind.ADD_PREDICATE, (f"{U}.age", ">")))
    kb = KnowledgeBase()
    trip, new = backpropagate(tree, view, node, success(node, view, "SELECT age, city FROM users WHERE age > 20"), kb)
    assert new
    path = tree.path(node)
    assert [n.success_triplets for n in path[1:]] == [[trip.id]] * 3
    assert tree.root.visit_count == 1 and all(n.visit_count == 1 for n in path)
    for entity in ("table:shop.main.users", view.columns[f"{U}.age"].field_node, view.columns[f"{U}.city"].field_node):
        assert graph.feedback[entity] == [trip.id]


def test_failure_at_depth_two(shop_graph):
    tree = ExplorationTree()
    a = tree.add_child(tree.root, sel(f"{U}.age"))
    sibling = tree.add_child(tree.root, sel(f"{U}.city"))
    b = tree.add_child(a, sel(f"{U}.gender"))
    backpropagate(tree, shop_graph, b, SimulationOutcome(SYNTAX_ERROR, sql="x"))
    assert (a.failure_count, b.failure_count, sibling.failure_count, tree.root.failure_count) == (1, 1, 0, 0)
    assert sibling.visit_count == 0 and a.visit_count == 1


def test_shared_prefix_collects_both_triplets():
    graph = graph_from_catalog(introspect_catalog("fixture:shop"))
    view = SchemaView(graph)
    tree = ExplorationTree()
    kb = KnowledgeBase()
    prefix = tree.add_child(tree.root, sel(f"{U}.age"))
    x = tree.add_child(prefix, sel(f"{U}.city"))
    y = tree.add_child(prefix, sel(f"{U}.gender"))
    t1, _ = backpropagate(tree, view, x, success(x, view, "SELECT age, city FROM users"), kb)
    t2, _ = backpropagate(tree, view, y, success(y, view, "SELECT age, gender FROM users"), kb)
    assert prefix.success_triplets == [t1.id, t2.id]
    assert x.success_triplets == [t1.id] and y.success_triplets == [t2.id]


# -- driver --------------------------------------------------------------------------


def test_guaranteed_valid_policy_on_two_tables(two_db):
    graph, ex = two_db
    result = run_exploration(graph, ExplorationConfig(target_triplets=5), Gateway(OfflinePolicy(1)), ex)
    assert len(result.triplets) == 5
    for t in result.triplets:
        assert classify(ex.execute(t.sql), t.sql) is ResultClass.NONTRIVIAL
    assert result.tree.root.visit_count == result.stats.iterations


def test_one_iteration_with_failing_policy(two_db):
    graph, ex = two_db

    def bad(req):
        if req.kind is RequestKind.SQL_COMPLETION:
            return "SELEC nothing"
        return OfflinePolicy(None).complete(req)

    result = run_exploration(graph, ExplorationConfig(max_iterations=1), gw(bad), ex)
    assert result.triplets == [] and result.stats.iterations == 1
    assert result.stats.outcomes == {SYNTAX_ERROR: 1}
    assert result.stats.executor_calls == 0


def test_alternating_policy_counts(two_db):
    graph, ex = two_db
    offline = OfflinePolicy(None)
    calls = {"n": 0}

    def alternate(req):
        if req.kind is RequestKind.SQL_COMPLETION:
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                return "SELECT (broken"
        return offline.complete(req)

    result = run_exploration(graph, ExplorationConfig(target_triplets=1000, max_iterations=12), gw(alternate), ex)
    st = result.stats
    assert st.iterations == 12 and st.outcomes.get(SYNTAX_ERROR) == 6
    assert len(result.triplets) == st.outcomes.get(SUCCESS, 0)
    # node nK was simulated by the K-th completion; even K failed and marked its non-root path
    total_fail_marks = sum(n.failure_count for n in result.tree.nodes.values())
    depth_of_failures = sum(
        n.depth for n in result.tree.nodes.values() if int(n.id[1:]) % 2 == 0 and n.id != "n0"
    )
    assert total_fail_marks == depth_of_failures


def test_tree_invariants_and_root_visits(shop_graph, shop_exec):
    graph = graph_from_catalog(introspect_catalog("fixture:shop"))
    for seed in range(4):
        result = run_exploration(graph, ExplorationConfig(target_triplets=15, max_iterations=40), Gateway(OfflinePolicy(seed)), shop_exec)
        tree = result.tree
        assert tree.root.visit_count == result.stats.iterations
        for node in tree.nodes.values():
            if node.parent is None:
                continue
            parent = tree.nodes[node.parent]
            assert node.state.actions[:-1] == parent.state.actions and node.depth == parent.depth + 1
            assert node.id not in {p.id for p in tree.path(parent)}


def test_run_is_byte_identical(tmp_path):
    outs = []
    for i in range(2):
        graph = graph_from_catalog(introspect_catalog("fixture:shop"))
        ex = Executor("fixture:shop")
        out = tmp_path / f"kb{i}.jsonl"
        run_exploration(graph, ExplorationConfig(target_triplets=10), Gateway(OfflinePolicy(7)), ex, out=out)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] and outs[0]


def test_abort_persists_partial_results(tmp_path, shop_graph, shop_exec):
    offline = OfflinePolicy(None)
    calls = {"n": 0}

    def flaky(req):
        calls["n"] += 1
        if calls["n"] > 12:
            raise BackendUnavailable("endpoint down")
        return offline.complete(req)

    graph = graph_from_catalog(introspect_catalog("fixture:shop"))
    out = tmp_path / "kb.jsonl"
    result = run_exploration(graph, ExplorationConfig(), gw(flaky), shop_exec, out=out)
    assert result.stats.aborted and "endpoint down" in result.stats.aborted
    assert len(load_kb(out)) == len(result.triplets) > 0
