#include <catch_amalgamated.hpp>

#include <random>

#include "tsor/fabric.hpp"
#include "tsor/service.hpp"
#include "tsor/shmq.hpp"

using namespace tsor;

TEST_CASE("WorkMessage wire layout is fixed-width little-endian") {
    WorkMessage m;
    m.msg_type = MsgType::write_req;
    m.socket_id = 0x01020304;
    m.channel_key = 0xa0b0c0d0;
    m.src_ep = {7, parse_ip("10.244.1.1").value(), 0x1234};
    m.dst_ep = {8, parse_ip("10.244.2.5").value(), 0x5678};
    m.payload_u32 = 0xdeadbeef;

    uint8_t buf[WorkMessage::kWireSize];
    m.encode(buf);

    REQUIRE(buf[0] == 3);  // WriteReq
    REQUIRE(buf[1] == 0);
    REQUIRE(buf[4] == 0x04);
    REQUIRE(buf[7] == 0x01);
    REQUIRE(buf[8] == 0xd0);
    REQUIRE(buf[12] == 7);
    REQUIRE(buf[16] == 1);     // 10.244.1.1 LE: 01 01 f4 0a
    REQUIRE(buf[17] == 1);
    REQUIRE(buf[18] == 0xf4);
    REQUIRE(buf[19] == 0x0a);
    REQUIRE(buf[20] == 0x34);
    REQUIRE(buf[21] == 0x12);
    REQUIRE(buf[36] == 0xef);
    for (size_t i = 40; i < 64; ++i) REQUIRE(buf[i] == 0);  // unused bytes zeroed

    WorkMessage d = WorkMessage::decode(buf);
    REQUIRE(d.msg_type == m.msg_type);
    REQUIRE(d.socket_id == m.socket_id);
    REQUIRE(d.channel_key == m.channel_key);
    REQUIRE(d.src_ep == m.src_ep);
    REQUIRE(d.dst_ep == m.dst_ep);
    REQUIRE(d.payload_u32 == m.payload_u32);
}

TEST_CASE("ControlMessage wire layout") {
    ControlMessage m;
    m.kind = CtrlKind::conn_resp;
    m.src_ep = {1, parse_ip("10.244.2.5").value(), 546};
    m.dst_ep = {1, parse_ip("10.244.1.1").value(), 40001};
    m.initiator_channel_key = 3;
    m.responder_channel_key = 9;
    m.read_mr = 0x11223344;
    m.read_capacity = 65536;
    m.initial_credit = 65536;
    m.reason = 0x0102;

    uint8_t buf[ControlMessage::kWireSize];
    m.encode(buf);
    REQUIRE(buf[0] == 2);  // ConnResp
    REQUIRE(buf[28] == 3);
    REQUIRE(buf[32] == 9);
    REQUIRE(buf[36] == 0x44);
    REQUIRE(buf[39] == 0x11);
    REQUIRE(buf[40] == 0x00);
    REQUIRE(buf[41] == 0x00);
    REQUIRE(buf[42] == 0x01);
    REQUIRE(buf[48] == 0x02);
    REQUIRE(buf[49] == 0x01);
    for (size_t i = 50; i < 64; ++i) REQUIRE(buf[i] == 0);

    ControlMessage d = ControlMessage::decode(buf);
    REQUIRE(d.kind == m.kind);
    REQUIRE(d.src_ep == m.src_ep);
    REQUIRE(d.dst_ep == m.dst_ep);
    REQUIRE(d.initiator_channel_key == 3);
    REQUIRE(d.responder_channel_key == 9);
    REQUIRE(d.read_mr == m.read_mr);
    REQUIRE(d.read_capacity == 65536);
    REQUIRE(d.initial_credit == 65536);
    REQUIRE(d.reason == 0x0102);
}

TEST_CASE("rendezvous record round trip") {
    RendezvousRecord r{42, 7, 65536};
    uint8_t buf[RendezvousRecord::kWireSize];
    r.encode(buf);
    REQUIRE(buf[0] == 42);
    REQUIRE(buf[4] == 7);
    REQUIRE(buf[8] == 0);
    REQUIRE(buf[10] == 1);
    auto d = RendezvousRecord::decode(buf);
    REQUIRE(d.node_id == 42);
    REQUIRE(d.control_mr == 7);
    REQUIRE(d.control_capacity == 65536);
}

TEST_CASE("random messages encode/decode round trip") {
    std::mt19937_64 rng(99);
    for (int i = 0; i < 2000; ++i) {
        WorkMessage m;
        m.msg_type = static_cast<MsgType>(1 + rng() % 8);
        m.socket_id = static_cast<uint32_t>(rng());
        m.channel_key = static_cast<uint32_t>(rng());
        m.src_ep = {static_cast<uint32_t>(rng()), static_cast<uint32_t>(rng()),
                    static_cast<uint16_t>(rng())};
        m.dst_ep = {static_cast<uint32_t>(rng()), static_cast<uint32_t>(rng()),
                    static_cast<uint16_t>(rng())};
        m.payload_u32 = static_cast<uint32_t>(rng());
        uint8_t buf[WorkMessage::kWireSize];
        m.encode(buf);
        WorkMessage d = WorkMessage::decode(buf);
        REQUIRE(d.msg_type == m.msg_type);
        REQUIRE(d.socket_id == m.socket_id);
        REQUIRE(d.channel_key == m.channel_key);
        REQUIRE(d.src_ep == m.src_ep);
        REQUIRE(d.dst_ep == m.dst_ep);
        REQUIRE(d.payload_u32 == m.payload_u32);
    }
}

TEST_CASE("ip formatting") {
    REQUIRE(format_ip(parse_ip("10.244.1.1").value()) == "10.244.1.1");
    REQUIRE(format_ip(parse_ip("202.2.3.4").value()) == "202.2.3.4");
    REQUIRE_FALSE(parse_ip("10.244").has_value());
    REQUIRE_FALSE(parse_ip("10.244.1.256").has_value());
    REQUIRE_FALSE(parse_ip("a.b.c.d").has_value());
}
