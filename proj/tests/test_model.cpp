#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "calda/gradcheck.hpp"
#include "calda/model.hpp"

using namespace calda;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(static_cast<bool>(is));
    return std::string(std::istreambuf_iterator<char>(is), {});
}

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("default projection head width is 128") {
    ModelConfig cfg;
    Rng rng(1);
    ModelParams p = init_params(cfg, rng);
    REQUIRE(p.contrastive_head.w.shape[1] == 128);
    Tensor f({2, p.feature_dim()});
    HeadsCache hc;
    heads_forward(p, f, hc);
    REQUIRE(hc.z.shape == std::vector<std::size_t>{2, 128});
}

TEST_CASE("zero features give logits equal to biases") {
    ModelConfig cfg = gradcheck_model_config();
    Rng rng(2);
    ModelParams p = init_params(cfg, rng);
    for (double& v : p.task_head.b.data) v = 0.25;
    Tensor f({3, p.feature_dim()});
    HeadsCache hc;
    heads_forward(p, f, hc);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < cfg.n_classes; ++j)
            REQUIRE(hc.task_logits.at(i, j) == p.task_head.b.data[j]);
}

TEST_CASE("zero input gives the pooled bias response") {
    ModelConfig cfg = gradcheck_model_config();
    Rng rng(3);
    ModelParams p = init_params(cfg, rng);
    for (std::size_t i = 0; i < p.conv.size(); ++i)
        for (std::size_t k = 0; k < p.conv[i].bias.size(); ++k)
            p.conv[i].bias.data[k] = 0.1 * double(k + 1) * double(i + 1);
    Tensor x({1, cfg.in_channels, 8});
    Tensor f = feature_extract(p, x);
    // forward the bias-only response by hand: each block sees a constant
    // per-channel input, so every timestep of the oracle matches the first
    Tensor cur = x;
    for (const auto& blk : p.conv)
        cur = relu_forward(conv1d_forward(cur, blk.kernels, blk.bias, Padding::Same));
    Tensor expect = global_avg_pool(cur);
    for (std::size_t c = 0; c < f.size(); ++c) REQUIRE(f.data[c] == expect.data[c]);
    // and the response is nonzero, so the check is not vacuous
    double mag = 0.0;
    for (double v : f.data) mag += std::abs(v);
    REQUIRE(mag > 0.0);
}

TEST_CASE("gradient reversal scales and flips") {
    Tensor g({3}, {1.0, -2.0, 0.5});
    Tensor r = grl_backward(g, 0.7);
    REQUIRE(r.data == std::vector<double>{-0.7, 1.4, -0.35});
    Tensor zero = grl_backward(g, 0.0);
    for (double v : zero.data) REQUIRE(v == 0.0);  // detached adversary
    // double reversal restores the sign with lambda^2 scaling
    Tensor rr = grl_backward(r, 0.7);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(std::abs(rr.data[i] - 0.49 * g.data[i]) < 1e-15);
    REQUIRE_THROWS_AS(grl_backward(g, -0.1), ContractError);
}

TEST_CASE("adversary schedule endpoints") {
    GrlSchedule s;
    REQUIRE(lambda_schedule(s, 0.0) == 0.0);
    REQUIRE(std::abs(lambda_schedule(s, 1.0) - 0.99990920426259511) < 1e-12);
    REQUIRE(lambda_schedule(s, 0.5) > lambda_schedule(s, 0.25));
    REQUIRE_THROWS_AS(lambda_schedule(s, 1.5), ContractError);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    Rng rng(4);
    ModelParams p = init_params(gradcheck_model_config(), rng);
    ModelParams before = p;
    AdamState st = init_adam(p);
    adam_step(p, zeros_like(p), st, AdamConfig{});
    REQUIRE(st.step == 1);
    for_each_param(p, [&](const std::string& n, Tensor& t) {
        for_each_param(before, [&](const std::string& m, Tensor& u) {
            if (n == m) REQUIRE(t.data == u.data);
        });
    });
}

TEST_CASE("adam first step approximates -lr * sign(g)") {
    Rng rng(5);
    ModelParams p = init_params(gradcheck_model_config(), rng);
    ModelParams before = p;
    ModelParams g = zeros_like(p);
    for_each_param(g, [&](const std::string&, Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = (i % 2 == 0) ? 3.0 : -3.0;
    });
    AdamState st = init_adam(p);
    AdamConfig cfg;
    adam_step(p, g, st, cfg);
    std::vector<Tensor*> ps, bs;
    for_each_param(p, [&](const std::string&, Tensor& t) { ps.push_back(&t); });
    for_each_param(before, [&](const std::string&, Tensor& t) { bs.push_back(&t); });
    for (std::size_t s = 0; s < ps.size(); ++s)
        for (std::size_t i = 0; i < ps[s]->size(); ++i) {
            const double sign = (i % 2 == 0) ? 1.0 : -1.0;
            const double delta = ps[s]->data[i] - bs[s]->data[i];
            REQUIRE(std::abs(delta + cfg.lr * sign) < 1e-9);
        }
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
    Rng rng(6);
    ModelParams p = init_params(gradcheck_model_config(), rng);
    ModelParams g = zeros_like(p);
    g.task_head.w.data[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState st = init_adam(p);
    try {
        adam_step(p, g, st, AdamConfig{});
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        REQUIRE(std::string(e.what()).find("c.w") != std::string::npos);
    }
}

TEST_CASE("full-model gradients match finite differences") {
    for (bool pl : {false, true}) {
        GradCheckReport report = gradcheck_full_model(42, pl, /*with_ws=*/!pl);
        INFO("pl=" << pl << " worst=" << report.worst);
        REQUIRE(report.worst < 1e-4);
    }
}

TEST_CASE("checkpoint round-trip is byte-identical and restores the trajectory") {
    Rng rng(7);
    ModelParams p = init_params(gradcheck_model_config(), rng);
    AdamState st = init_adam(p);
    // advance a few steps with deterministic synthetic gradients
    auto fake_grads = [](const ModelParams& params, int k) {
        ModelParams g = zeros_like(params);
        for_each_param(const_cast<ModelParams&>(params), [&](const std::string& n, Tensor& t) {
            for_each_param(g, [&](const std::string& m, Tensor& u) {
                if (n == m)
                    for (std::size_t i = 0; i < t.size(); ++i)
                        u.data[i] = std::sin(t.data[i] * double(k + 1));
            });
        });
        return g;
    };
    AdamConfig cfg;
    for (int k = 0; k < 4; ++k) adam_step(p, fake_grads(p, k), st, cfg);

    const std::string path = tmp_path("ckpt_roundtrip.bin");
    checkpoint_save(p, st, path);
    const std::string bytes1 = read_file(path);
    REQUIRE(bytes1.substr(0, 10) == "CALDACKPT1");

    Rng rng2(8);
    ModelParams q = init_params(gradcheck_model_config(), rng2);
    AdamState st2 = init_adam(q);
    checkpoint_load(q, st2, path);
    REQUIRE(st2.step == 4);
    const std::string path2 = tmp_path("ckpt_roundtrip2.bin");
    checkpoint_save(q, st2, path2);
    REQUIRE(read_file(path2) == bytes1);

    // continuing after a save/load matches continuing without one
    for (int k = 4; k < 7; ++k) {
        adam_step(p, fake_grads(p, k), st, cfg);
        adam_step(q, fake_grads(q, k), st2, cfg);
    }
    std::vector<Tensor*> ps, qs;
    for_each_param(p, [&](const std::string&, Tensor& t) { ps.push_back(&t); });
    for_each_param(q, [&](const std::string&, Tensor& t) { qs.push_back(&t); });
    for (std::size_t s = 0; s < ps.size(); ++s) REQUIRE(ps[s]->data == qs[s]->data);
}

TEST_CASE("checkpoint load failure modes") {
    Rng rng(9);
    ModelParams p = init_params(gradcheck_model_config(), rng);
    AdamState st = init_adam(p);
    const std::string path = tmp_path("ckpt_fail.bin");
    checkpoint_save(p, st, path);

    SECTION("truncated file") {
        std::string bytes = read_file(path);
        std::ofstream os(path, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        os.close();
        REQUIRE_THROWS_AS(checkpoint_load(p, st, path), ContractError);
    }
    SECTION("bad magic") {
        std::string bytes = read_file(path);
        bytes[0] = 'X';
        std::ofstream os(path, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        os.close();
        REQUIRE_THROWS_AS(checkpoint_load(p, st, path), ContractError);
    }
    SECTION("shape mismatch") {
        ModelConfig other = gradcheck_model_config();
        other.proj_dim = 7;
        Rng r2(10);
        ModelParams q = init_params(other, r2);
        AdamState st2 = init_adam(q);
        REQUIRE_THROWS_AS(checkpoint_load(q, st2, path), ContractError);
    }
}
