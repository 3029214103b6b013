import pytest

from worldutil import NODE2_ADDR, booted_world, simple_scenario
from sdgateway.coap import (
    BAD_REQUEST,
    CHANGED,
    CONTENT,
    CREATED,
    GET,
    NOT_FOUND,
    POST,
    PUT,
    CoapMessage,
    Endpoint,
    MsgType,
    OptionSet,
)
from sdgateway.harness import NODE_ADDR, build_world
from sdgateway.lln import NodeState


def make_request(code, path, payload=b"", mid=900, token=b"\x77", **optkw):
    return CoapMessage(MsgType.CON, code, mid, token=token,
                       options=OptionSet(uri_path=tuple(path.split("/")), **optkw),
                       payload=payload)


CLIENT_EP = Endpoint("cccc::3", 60001)


def test_boot_serves_after_one_round_trip():
    world = booted_world(simple_scenario())
    node = world.nodes["n1"]
    assert node.state is NodeState.UP
    assert len(node.associations) == 1
    _epoch, sent, acked = node.associations[0]
    assert sent == 0.0
    assert 10.0 <= acked - sent <= 40.0  # one LLN round trip, 1 hop


def test_single_registration_loss_adds_one_retransmission_timeout():
    sc = simple_scenario()
    world = build_world(sc)
    node = world.nodes["n1"]
    world.network.blackholes.add(node.addr)
    world.sim.schedule_at(0.0, node.boot)
    world.sim.schedule_at(1.0, lambda: world.network.blackholes.clear())
    world.sim.run(until=20_000.0)
    assert node.state is NodeState.UP
    delay = node.associations[0][2] - node.associations[0][1]
    assert 3000.0 <= delay <= 3100.0  # first retry fires after ACK_TIMEOUT
    assert node._reg_transmissions == 2


def test_boot_stalls_after_max_retransmit_on_dead_link():
    sc = simple_scenario(settle=200_000.0)
    world = build_world(sc)
    node = world.nodes["n1"]
    world.network.blackholes.add(node.addr)
    world.sim.schedule_at(0.0, node.boot)
    world.sim.run(until=150_000.0)
    assert node.state is NodeState.STALLED
    failures = world.sim.trace.find("boot_failed", node="n1")
    assert len(failures) == 1
    assert failures[0][1]["retries"] == 4
    sends = [f for _, f in world.sim.trace.find("send")
             if f["src"] == str(node.endpoint) and "sd/register" in f["msg"]]
    assert len(sends) == 5  # initial transmission plus MAX_RETRANSMIT retries


def test_booting_node_blocks_other_traffic():
    sc = simple_scenario()
    world = build_world(sc)
    node = world.nodes["n1"]
    world.network.blackholes.add(node.addr)
    world.sim.schedule_at(0.0, node.boot)
    world.sim.run(until=100.0)
    assert node.state is NodeState.BOOTING
    # A request delivered while blocked on the registration is dropped.
    from sdgateway.lln import Frame
    node.on_frame(Frame(bytes([0x40, GET, 0, 1]), CLIENT_EP, node.endpoint))
    assert world.sim.trace.find("drop", why="blocked-booting", node="n1")


def test_put_stores_value_and_returns_changed():
    world = booted_world(simple_scenario(resources={"a/lb": b"0"}))
    node = world.nodes["n1"]
    resp = node.handle_request(make_request(PUT, "a/lb", b"10"), CLIENT_EP)
    assert resp.code == CHANGED
    assert resp.mid == 900 and resp.token == b"\x77"
    assert node.resources["a/lb"] == b"10"


def test_get_returns_value_or_not_found():
    world = booted_world(simple_scenario(resources={"s/t": b"18"}))
    node = world.nodes["n1"]
    ok = node.handle_request(make_request(GET, "s/t"), CLIENT_EP)
    assert ok.code == CONTENT and ok.payload == b"18"
    missing = node.handle_request(make_request(GET, "no/where"), CLIENT_EP)
    assert missing.code == NOT_FOUND


def test_recovery_observe_seeds_counter_and_next_changes_continue():
    sc = simple_scenario(resources={"gpio/btn": b"0"})
    world = booted_world(sc)
    node = world.nodes["n1"]
    client = world.clients["c1"]
    rel_port = 50_000
    client.relationships[(node.addr, "gpio/btn")] = {
        "port": rel_port, "token": b"\x0b\x2a", "cancel": False}
    resp = node.handle_request(
        make_request(GET, "gpio/btn", token=b"\x0b\x2a", observe=10),
        Endpoint(client.addr, rel_port))
    assert resp.code == CONTENT and resp.options.observe == 10
    obs = node.observers[("gpio/btn", Endpoint(client.addr, rel_port))]
    assert obs.counter == 10
    world.sim.run(until=world.sim.now + 1000.0)
    node.change_resource("gpio/btn", b"1")
    node.change_resource("gpio/btn", b"2")
    world.sim.run(until=world.sim.now + 1000.0)
    values = [n["observe"] for n in client.notifications]
    assert values[-3:] == [10, 11, 12]  # push at 10, then the two changes


def test_loader_post_for_unknown_file_is_rejected():
    world = booted_world(simple_scenario())
    node = world.nodes["n1"]
    msg = make_request(POST, "ldr")
    msg = CoapMessage(MsgType.CON, POST, 901, token=b"\x01",
                      options=OptionSet(uri_path=("ldr",), uri_query=("file=ghost",)))
    resp = node.handle_request(msg, CLIENT_EP)
    assert resp.code == BAD_REQUEST
    assert node.loaded_modules == set()


def test_loader_post_reloads_from_flash():
    world = booted_world(simple_scenario())
    node = world.nodes["n1"]
    node.flash["blinker"] = b"\x01\x02"
    msg = CoapMessage(MsgType.CON, POST, 902, token=b"\x01",
                      options=OptionSet(uri_path=("ldr",), uri_query=("file=blinker",)))
    resp = node.handle_request(msg, CLIENT_EP)
    assert resp.code == CREATED
    assert node.loaded_modules == {"blinker"}


def test_notify_without_observers_sends_nothing():
    world = booted_world(simple_scenario())
    node = world.nodes["n1"]
    before = len(world.sim.trace.find("send"))
    node.notify("s/t")
    world.sim.run(until=world.sim.now + 500.0)
    assert len(world.sim.trace.find("send")) == before


def test_scripted_counter_jumps_but_never_backward():
    world = booted_world(simple_scenario(resources={"s/t": b"1"}))
    node = world.nodes["n1"]
    client = world.clients["c1"]
    world.sim.schedule_at(world.sim.now, lambda: client.observe(node.addr, "s/t"))
    world.sim.run(until=world.sim.now + 1000.0)
    for value in (12, 20, 44):
        node.notify("s/t", counter=value)
        world.sim.run(until=world.sim.now + 500.0)
    values = [n["observe"] for n in client.notifications]
    assert values == [0, 0, 12, 20, 44]  # registration echo, push, then jumps
    with pytest.raises(ValueError):
        node.notify("s/t", counter=5)


def test_crash_clears_volatile_state_but_keeps_flash():
    world = booted_world(simple_scenario(resources={"s/t": b"18"}))
    node = world.nodes["n1"]
    node.flash["img"] = b"\xaa"
    node.handle_request(make_request(PUT, "s/t", b"25"), CLIENT_EP)
    node.handle_request(make_request(GET, "s/t", observe=0), CLIENT_EP)
    epoch = node.boot_epoch
    node.crash(500.0)
    assert node.state is NodeState.DOWN
    world.sim.run(until=world.sim.now + 5000.0)
    assert node.state is NodeState.UP
    assert node.boot_epoch == epoch + 1
    assert node.resources == {"s/t": b"18"}          # back to declared defaults
    assert node.observers == {} and node.bindings == {}
    assert node.loaded_modules == set()
    assert node.flash == {"img": b"\xaa"}            # persistent across the crash
    assert node.addr == NODE_ADDR


def test_crash_during_inflight_exchange_completes_via_retransmission():
    sc = simple_scenario(resources={"s/t": b"0"}, settle=60_000.0)
    world = booted_world(sc)
    node, client = world.nodes["n1"], world.clients["c1"]
    t = world.sim.now
    world.sim.schedule_at(t + 100.0, lambda: node.crash(1000.0))
    world.sim.schedule_at(t + 150.0, lambda: client.put(node.addr, "s/t", b"9"))
    world.sim.run(until=t + 30_000.0)
    assert world.sim.trace.find("client_retransmit", client="c1")
    assert node.resources["s/t"] == b"9"  # retransmitted request finally served
    assert not world.sim.trace.find("client_timeout", client="c1")


def test_binding_pushes_put_to_destination_respecting_pmin():
    sc = simple_scenario(resources={"s/t": b"18"}, second_node=True)
    world = booted_world(sc)
    node, node2, client = world.nodes["n1"], world.nodes["n2"], world.clients["c1"]
    from sdgateway.coap import BindingInfo
    info = BindingInfo(dest_addr=NODE2_ADDR, dest_resource="a/led", pmin=5, pmax=600)
    t = world.sim.now
    world.sim.schedule_at(t, lambda: client.bind(node.addr, "s/t", info))
    world.sim.run(until=t + 1000.0)
    assert ("s/t", NODE2_ADDR, "a/led") in node.bindings
    # Two rapid changes within pmin coalesce into one deferred push.
    node.change_resource("s/t", b"20")
    node.change_resource("s/t", b"21")
    world.sim.run(until=world.sim.now + 20_000.0)
    puts = world.sim.trace.find("binding_put", node="n1")
    assert len(puts) == 1
    assert node2.resources["a/led"] == b"21"


def test_binding_keepalive_fires_at_pmax():
    sc = simple_scenario(resources={"s/t": b"18"}, second_node=True, settle=40_000.0)
    world = booted_world(sc)
    node, client = world.nodes["n1"], world.clients["c1"]
    from sdgateway.coap import BindingInfo
    info = BindingInfo(dest_addr=NODE2_ADDR, dest_resource="a/led", pmin=1, pmax=10)
    world.sim.schedule_at(world.sim.now, lambda: client.bind(node.addr, "s/t", info))
    world.sim.run(until=world.sim.now + 25_000.0)
    # No changes at all: the pmax timer alone must have pushed at least twice.
    assert len(world.sim.trace.find("binding_put", node="n1")) >= 2


def test_node_to_node_traffic_bypasses_gateway():
    sc = simple_scenario(resources={"s/t": b"18"}, second_node=True)
    world = booted_world(sc)
    node, node2, client = world.nodes["n1"], world.nodes["n2"], world.clients["c1"]
    from sdgateway.coap import BindingInfo
    info = BindingInfo(dest_addr=NODE2_ADDR, dest_resource="a/led", pmin=0, pmax=600)
    world.sim.schedule_at(world.sim.now, lambda: client.bind(node.addr, "s/t", info))
    world.sim.run(until=world.sim.now + 1000.0)
    entries_before = len(world.gateway.directory.entries)
    node.change_resource("s/t", b"33")
    world.sim.run(until=world.sim.now + 2000.0)
    assert node2.resources["a/led"] == b"33"
    # The binding push created no directory traffic and never reached a client.
    assert len(world.gateway.directory.entries) == entries_before
    assert not [f for f in world.network.external_frames if b"33" in f]


def test_con_always_policy_confirms_every_notification():
    sc = simple_scenario(resources={"s/t": b"1"})
    from sdgateway.lln import NotifyPolicy
    sc.notify_policy = NotifyPolicy.CON_ALWAYS
    world = booted_world(sc)
    node, client = world.nodes["n1"], world.clients["c1"]
    world.sim.schedule_at(world.sim.now, lambda: client.observe(node.addr, "s/t"))
    world.sim.run(until=world.sim.now + 1000.0)
    node.change_resource("s/t", b"2")
    world.sim.run(until=world.sim.now + 1000.0)
    types = [f["type"] for _, f in world.sim.trace.find("notify", node="n1")]
    assert types and all(t == "CON" for t in types)


def test_deterministic_trace_for_same_seed():
    def run_once():
        sc = simple_scenario(seed=77, loss=0.2, resources={"s/t": b"1", "a/b": b"2"})
        world = build_world(sc)
        node, client = world.nodes["n1"], world.clients["c1"]
        world.sim.schedule_at(0.0, node.boot)
        world.sim.schedule_at(8000.0, lambda: client.put(node.addr, "s/t", b"5"))
        world.sim.schedule_at(9000.0, lambda: client.observe(node.addr, "a/b"))
        world.sim.schedule_at(12_000.0, lambda: node.crash(700.0))
        world.sim.run(until=60_000.0)
        return world.sim.trace.text()

    assert run_once() == run_once()
