#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "modalanchor/metrics.hpp"
#include "modalanchor/taskgen.hpp"
#include "modalanchor/trainer.hpp"

using namespace modalanchor;

namespace {

ModelConfig gen_config() {
    ModelConfig cfg;
    cfg.d_v = 8;
    cfg.vocab = 128;
    cfg.max_len = 6;
    cfg.d_h = 8;
    cfg.d_e = 4;
    return cfg;
}

StreamTemplate small_template() {
    StreamTemplate tmpl;
    tmpl.train_sizes = {80, 80};
    tmpl.eval_size = 32;
    tmpl.band_width = 16;
    tmpl.band_shift = 16;
    return tmpl;
}

bool streams_identical(const TaskStream& a, const TaskStream& b) {
    if (a.tasks.size() != b.tasks.size()) return false;
    for (std::size_t k = 0; k < a.tasks.size(); ++k) {
        const auto& ta = a.tasks[k];
        const auto& tb = b.tasks[k];
        if (ta.train.size() != tb.train.size() || ta.eval.size() != tb.eval.size()) return false;
        for (std::size_t i = 0; i < ta.train.size(); ++i) {
            if (ta.train[i].image != tb.train[i].image) return false;
            if (ta.train[i].caption != tb.train[i].caption) return false;
        }
        for (std::size_t i = 0; i < ta.eval.size(); ++i) {
            if (ta.eval[i].image != tb.eval[i].image) return false;
            if (ta.eval[i].caption != tb.eval[i].caption) return false;
        }
    }
    return true;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("taskgen_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("same seed regenerates the stream bit-identically", "[taskgen]") {
    const auto cfg = gen_config();
    const auto tmpl = small_template();
    const TaskStream a = generate_task_stream(42, 2, tmpl, cfg);
    const TaskStream b = generate_task_stream(42, 2, tmpl, cfg);
    REQUIRE(streams_identical(a, b));
    const TaskStream c = generate_task_stream(43, 2, tmpl, cfg);
    REQUIRE_FALSE(streams_identical(a, c));
}

TEST_CASE("default stream sizes follow the 1:5 scaling", "[taskgen]") {
    StreamTemplate tmpl;
    REQUIRE(tmpl.train_sizes == std::vector<std::size_t>{2000, 1600, 2400, 3000});
}

TEST_CASE("zero shift draws successive tasks from the same distribution", "[taskgen]") {
    const auto cfg = gen_config();
    auto tmpl = small_template();
    tmpl.rotation_angle = 0.0;
    tmpl.band_shift = 0;
    const TaskStream stream = generate_task_stream(7, 2, tmpl, cfg);

    // Identical generating parameters: concept tokens fall in the same band
    // and the per-concept image means agree across tasks.
    for (const auto& task : stream.tasks) {
        for (const Pair& p : task.train) {
            REQUIRE(p.caption[0] >= 0);
            REQUIRE(p.caption[0] < static_cast<int>(tmpl.n_concepts));
        }
    }
    std::array<std::vector<double>, 2> mean_by_task;
    for (std::size_t k = 0; k < 2; ++k) {
        std::vector<double> mean(cfg.d_v, 0.0);
        std::size_t count = 0;
        for (const Pair& p : stream.tasks[k].train) {
            if (p.caption[0] != 0) continue;
            for (std::size_t j = 0; j < cfg.d_v; ++j) mean[j] += p.image[j];
            ++count;
        }
        REQUIRE(count > 0);
        for (double& m : mean) m /= static_cast<double>(count);
        mean_by_task[k] = mean;
    }
    for (std::size_t j = 0; j < cfg.d_v; ++j) {
        REQUIRE(mean_by_task[0][j] == Catch::Approx(mean_by_task[1][j]).margin(0.4));
    }
}

TEST_CASE("band overflow and concept overflow are rejected", "[taskgen]") {
    const auto cfg = gen_config();
    auto tmpl = small_template();
    tmpl.n_concepts = 20;  // > band_width 16
    REQUIRE_THROWS_AS(generate_task_stream(1, 2, tmpl, cfg), ParameterError);

    tmpl = small_template();
    tmpl.band_shift = 120;  // second band would exceed vocab 128
    REQUIRE_THROWS_AS(generate_task_stream(1, 2, tmpl, cfg), ParameterError);

    REQUIRE_THROWS_AS(generate_task_stream(1, 1, small_template(), cfg), ParameterError);
}

TEST_CASE("pair files round-trip and validate", "[taskgen]") {
    const auto cfg = gen_config();
    TempDir tmp;
    const std::string path = (tmp.path / "pairs.jsonl").string();

    SECTION("empty file loads as an empty sequence") {
        std::ofstream(path).close();
        REQUIRE(load_pairs(path, cfg).empty());
    }
    SECTION("single pair round-trips") {
        Pair p;
        p.task_id = "A";
        p.image = {1, 2, 3, 4, 5, 6, 7, 8};
        p.caption = {3, 1, 4};
        save_pairs({p}, path);
        const auto loaded = load_pairs(path, cfg);
        REQUIRE(loaded.size() == 1);
        REQUIRE(loaded[0].task_id == "A");
        REQUIRE(loaded[0].image == p.image);
        // Short captions are padded with token 0 to max_len.
        REQUIRE(loaded[0].caption == std::vector<int>{3, 1, 4, 0, 0, 0});
    }
    SECTION("token out of vocabulary names the line") {
        std::ofstream out(path);
        out << R"({"task":"A","image":[1,2,3,4,5,6,7,8],"caption":[3]})" << "\n";
        out << R"({"task":"A","image":[1,2,3,4,5,6,7,8],"caption":[999]})" << "\n";
        out.close();
        REQUIRE_THROWS_MATCHES(load_pairs(path, cfg), ValidationError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring(":2") &&
                                   Catch::Matchers::ContainsSubstring("999")));
    }
    SECTION("malformed json names the line") {
        std::ofstream out(path);
        out << "{not json}\n";
        out.close();
        REQUIRE_THROWS_AS(load_pairs(path, cfg), ParseError);
    }
    SECTION("wrong image length is a validation error") {
        std::ofstream out(path);
        out << R"({"task":"A","image":[1,2],"caption":[3]})" << "\n";
        out.close();
        REQUIRE_THROWS_AS(load_pairs(path, cfg), ValidationError);
    }
    SECTION("writer emits keys in task, image, caption order") {
        Pair p;
        p.task_id = "A";
        p.image = {1, 2, 3, 4, 5, 6, 7, 8};
        p.caption = {3};
        save_pairs({p}, path);
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        REQUIRE(line.find("\"task\"") < line.find("\"image\""));
        REQUIRE(line.find("\"image\"") < line.find("\"caption\""));
    }
}

TEST_CASE("buffer stores the ceiling of ten percent", "[taskgen]") {
    std::vector<Pair> task(10);
    for (std::size_t i = 0; i < task.size(); ++i) {
        task[i].image = {static_cast<double>(i), 0.0};
        task[i].task_id = "A";
    }
    ReplayBuffer buffer;
    update_buffer(buffer, task);
    REQUIRE(buffer.size() == 1);
    REQUIRE_THROWS_AS(update_buffer(buffer, {}), ParameterError);
}

TEST_CASE("greedy selection picks the distant point second", "[taskgen][oracle]") {
    std::vector<Pair> task(3);
    task[0].image = {0.0, 0.0};
    task[1].image = {0.0, 0.0};
    task[2].image = {9.0, 9.0};
    for (auto& p : task) p.task_id = "A";

    ReplayBuffer buffer;
    buffer.capacity_fraction = 0.67;  // quota ceil(0.67*3) = 3... keep 2
    buffer.capacity_fraction = 0.5;   // ceil(1.5) = 2 picks
    update_buffer(buffer, task);
    REQUIRE(buffer.size() == 2);
    REQUIRE(buffer.items[0].image == std::vector<double>{0.0, 0.0});
    REQUIRE(buffer.items[1].image == std::vector<double>{9.0, 9.0});
}

TEST_CASE("greedy k-center matches a brute-force farthest-point oracle", "[taskgen][oracle]") {
    Rng rng(77);
    std::vector<Pair> task(40);
    for (auto& p : task) {
        p.image = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
        p.task_id = "A";
    }
    ReplayBuffer buffer;
    buffer.capacity_fraction = 0.25;  // 10 picks
    update_buffer(buffer, task);

    // Oracle: independent exhaustive farthest-first from index 0.
    std::vector<std::size_t> picked{0};
    while (picked.size() < 10) {
        double best_d = -1.0;
        std::size_t best = 0;
        for (std::size_t i = 0; i < task.size(); ++i) {
            double min_d = 1e300;
            for (std::size_t j : picked) {
                double d = 0.0;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double diff = task[i].image[c] - task[j].image[c];
                    d += diff * diff;
                }
                min_d = std::min(min_d, d);
            }
            if (min_d > best_d) {
                best_d = min_d;
                best = i;
            }
        }
        picked.push_back(best);
    }
    REQUIRE(buffer.size() == picked.size());
    for (std::size_t i = 0; i < picked.size(); ++i) {
        REQUIRE(buffer.items[i].image == task[picked[i]].image);
    }
}

TEST_CASE("buffer accumulates pairs from every completed task", "[taskgen]") {
    std::vector<Pair> task_a(20), task_b(20);
    Rng rng(3);
    for (auto& p : task_a) {
        p.image = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        p.task_id = "A";
    }
    for (auto& p : task_b) {
        p.image = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        p.task_id = "B";
    }
    ReplayBuffer buffer;
    update_buffer(buffer, task_a);
    update_buffer(buffer, task_b);
    REQUIRE(buffer.per_task_counts.at("A") == 2);
    REQUIRE(buffer.per_task_counts.at("B") == 2);
}

TEST_CASE("buffer cap invariant holds across tasks", "[taskgen][property]") {
    Rng rng(123);
    ReplayBuffer buffer;
    std::size_t total_seen = 0;
    for (std::size_t t = 0; t < 5; ++t) {
        std::vector<Pair> task(30 + 17 * t);
        for (auto& p : task) {
            p.image = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
            p.task_id = default_task_id(t);
        }
        update_buffer(buffer, task);
        total_seen += task.size();
        REQUIRE(static_cast<double>(buffer.size()) <=
                0.10 * static_cast<double>(total_seen) + static_cast<double>(t + 1));
    }
}

TEST_CASE("mix_batches composes replayed and current pairs", "[taskgen]") {
    std::vector<Pair> current_storage(8);
    for (std::size_t i = 0; i < 8; ++i) {
        current_storage[i].image = {static_cast<double>(i)};
        current_storage[i].task_id = "B";
    }
    std::vector<const Pair*> current;
    for (const auto& p : current_storage) current.push_back(&p);

    ReplayBuffer buffer;
    std::vector<Pair> old_task(10);
    for (auto& p : old_task) {
        p.image = {-1.0};
        p.task_id = "A";
    }
    update_buffer(buffer, old_task);

    Rng rng(9);
    SECTION("ratio zero returns the current batch untouched") {
        const auto mixed = mix_batches(current, buffer, 0.0, rng);
        REQUIRE(mixed == current);
    }
    SECTION("ratio 0.5 on batch 8 mixes 4 and 4") {
        const auto mixed = mix_batches(current, buffer, 0.5, rng);
        REQUIRE(mixed.size() == 8);
        std::size_t replayed = 0;
        for (const Pair* p : mixed)
            if (p->task_id == "A") ++replayed;
        REQUIRE(replayed == 4);
    }
    SECTION("empty buffer falls back to the pure current batch") {
        ReplayBuffer empty;
        const auto mixed = mix_batches(current, empty, 0.5, rng);
        REQUIRE(mixed == current);
    }
    SECTION("ratio outside [0,1] is rejected") {
        REQUIRE_THROWS_AS(mix_batches(current, buffer, 1.5, rng), ParameterError);
    }
}

TEST_CASE("rotation angle monotonically increases naive forgetting", "[taskgen][property]") {
    // Fixed seed, 2-task streams at three angles; naive forgetting must rise
    // strictly with the shift.
    ModelConfig cfg = gen_config();
    TrainConfig train;
    train.epochs = 3;
    train.batch_size = 16;
    train.fisher_samples = 8;
    train.fisher_batch = 4;
    train.probe_size = 16;
    train.eval_batch = 16;

    auto forgetting_at = [&](double angle) {
        StreamTemplate tmpl = small_template();
        tmpl.train_sizes = {160, 160};
        tmpl.eval_size = 64;
        tmpl.rotation_angle = angle;
        tmpl.band_shift = 0;  // isolate the rotation knob
        const TaskStream stream = generate_task_stream(11, 2, tmpl, cfg);
        StrategyConfig naive;
        naive.kind = StrategyKind::naive;
        const RunArtifacts artifacts = run_sequence(stream, naive, train, 11, cfg);
        REQUIRE_FALSE(artifacts.aborted);
        return forgetting_rate(artifacts.accuracy);
    };

    const double f0 = forgetting_at(0.0);
    const double f1 = forgetting_at(3.14159265358979 / 8.0);
    const double f2 = forgetting_at(3.14159265358979 / 4.0);
    REQUIRE(f0 < f1);
    REQUIRE(f1 < f2);
}
