#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <fstream>

#include "oracles.hpp"
#include "umigrat/model.hpp"
#include "umigrat/persist.hpp"
#include "umigrat/rng.hpp"

using namespace umigrat;
using namespace umigrat::testing;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "umigrat_persist_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

SequentialModel small_model(std::uint64_t seed) {
    FoundationSpec spec;
    spec.arch.module_count = 2;
    spec.arch.width = 10;
    spec.arch.embedding_dim = 6;
    spec.arch.input_h = 4;
    spec.arch.input_w = 4;
    spec.train.sample_count = 16;
    spec.train.max_epochs = 3;
    spec.train.target_loss = -1.0;
    return build_foundation(spec, seed).model;
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// reference hash, written independently of the common header
std::uint64_t fnv_oracle(const unsigned char* data, std::size_t n) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace

TEST_CASE("model round trip preserves embeddings to 32-bit precision") {
    const auto path = temp_dir() / "model.bin";
    const SequentialModel model = small_model(3);
    save_model(path, model, 99);
    const SequentialModel loaded = load_model(path);

    Rng rng(4);
    const Tensor x = random_tensor({16}, rng, 0.0, 1.0);
    const Tensor a = model.final_embedding(x);
    const Tensor b = loaded.final_embedding(x);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double rel = std::abs(a[i] - b[i]) / std::max(1e-6, std::abs(a[i]));
        CHECK(rel <= 1e-6);
    }
    CHECK(loaded.training_converged == model.training_converged);

    const ArtifactInfo info = peek_artifact(path);
    CHECK(info.kind == ArtifactKind::Model);
    CHECK(info.seed == 99);
}

TEST_CASE("round-trip stability: a second save/load cycle is bit-exact") {
    const auto dir = temp_dir();
    const SequentialModel model = small_model(5);
    save_model(dir / "m1.bin", model, 1);
    const SequentialModel m1 = load_model(dir / "m1.bin");
    save_model(dir / "m2.bin", m1, 1);
    const SequentialModel m2 = load_model(dir / "m2.bin");
    for (std::size_t i = 0; i < m1.module_count(); ++i) {
        CHECK(bit_equal(m1.modules()[i].weight, m2.modules()[i].weight));
        CHECK(bit_equal(m1.modules()[i].bias, m2.modules()[i].bias));
    }
    CHECK(read_bytes(dir / "m1.bin") == read_bytes(dir / "m2.bin"));
}

TEST_CASE("dataset round trip keeps pixels in range and stabilizes") {
    const auto dir = temp_dir();
    DatasetSpec spec;
    spec.kind = DatasetKind::Natural;
    spec.count = 5;
    spec.height = 6;
    spec.width = 6;
    spec.seed = 7;
    const Dataset d = sample_natural(spec);
    save_dataset(dir / "d1.bin", d, 7);
    const Dataset d1 = load_dataset(dir / "d1.bin");
    REQUIRE(d1.size() == d.size());
    for (const Tensor& img : d1.items)
        for (std::size_t i = 0; i < img.numel(); ++i) {
            CHECK(img[i] >= 0.0);
            CHECK(img[i] <= 1.0);
        }
    save_dataset(dir / "d2.bin", d1, 7);
    const Dataset d2 = load_dataset(dir / "d2.bin");
    for (std::size_t k = 0; k < d1.size(); ++k) CHECK(bit_equal(d1.items[k], d2.items[k]));
    CHECK(d1.spec.fingerprint() == d.spec.fingerprint());
}

TEST_CASE("perturbation round trip stays feasible under its stored budget") {
    const auto dir = temp_dir();
    const AttackBudget budget = AttackBudget::from_255_units(10, 2, 10);
    Rng rng(11);
    Perturbation p;
    p.budget = budget;
    p.anchor_fingerprint = 1234567;
    p.delta = Tensor({4, 4});
    for (std::size_t i = 0; i < 16; ++i) p.delta[i] = rng.uniform(-budget.epsilon, budget.epsilon);
    // include an exact-boundary entry, the hard case for 32-bit rounding
    p.delta[0] = budget.epsilon;
    p.delta[1] = -budget.epsilon;

    save_perturbation(dir / "p1.bin", p, 11);
    const Perturbation p1 = load_perturbation(dir / "p1.bin");
    CHECK(p1.delta.linf_norm() <= budget.epsilon);
    CHECK(p1.anchor_fingerprint == p.anchor_fingerprint);
    CHECK(p1.budget.epsilon == budget.epsilon);

    save_perturbation(dir / "p2.bin", p1, 11);
    const Perturbation p2 = load_perturbation(dir / "p2.bin");
    CHECK(bit_equal(p1.delta, p2.delta));
    CHECK(read_bytes(dir / "p1.bin") == read_bytes(dir / "p2.bin"));
}

TEST_CASE("umi artifact round trip preserves provenance") {
    const auto dir = temp_dir();
    UmiArtifact u;
    u.budget = AttackBudget::from_255_units(10, 2, 10);
    u.delta = Tensor({4, 4});
    Rng rng(13);
    for (std::size_t i = 0; i < 16; ++i)
        u.delta[i] = rng.uniform(-u.budget.epsilon, u.budget.epsilon);
    u.eta = 1.0;
    u.meta_rounds = 7;
    u.inner_steps = 5;
    u.lambda = 0.123456789;
    u.epsilon_schedule = {0.01, 0.02, 0.03, 0.039};
    u.dataset_fingerprint = 111;
    u.model_fingerprint = 222;
    u.fooling_rate_at_train = 0.75;
    u.rolled_back_rounds = {2};

    save_umi(dir / "u1.bin", u, 13);
    const UmiArtifact u1 = load_umi(dir / "u1.bin");
    CHECK(u1.meta_rounds == 7);
    CHECK(u1.inner_steps == 5);
    CHECK(u1.lambda == u.lambda);
    CHECK(u1.epsilon_schedule == u.epsilon_schedule);
    CHECK(u1.dataset_fingerprint == 111);
    CHECK(u1.model_fingerprint == 222);
    CHECK(u1.fooling_rate_at_train == 0.75);
    CHECK(u1.rolled_back_rounds == std::vector<std::size_t>{2});
    CHECK(u1.delta.linf_norm() <= u.budget.epsilon);

    save_umi(dir / "u2.bin", u1, 13);
    CHECK(read_bytes(dir / "u1.bin") == read_bytes(dir / "u2.bin"));
}

TEST_CASE("truncated files are rejected, not partially loaded") {
    const auto dir = temp_dir();
    const SequentialModel model = small_model(17);
    save_model(dir / "t.bin", model, 1);
    const std::string bytes = read_bytes(dir / "t.bin");
    for (std::size_t keep : {std::size_t{3}, std::size_t{20}, bytes.size() - 5}) {
        write_bytes(dir / "trunc.bin", bytes.substr(0, keep));
        CHECK_THROWS_AS((void)load_model(dir / "trunc.bin"), Error);
    }
}

TEST_CASE("payload tampering is caught by the fingerprint") {
    const auto dir = temp_dir();
    const SequentialModel model = small_model(19);
    save_model(dir / "f.bin", model, 1);
    std::string bytes = read_bytes(dir / "f.bin");
    bytes[bytes.size() - 3] ^= 0x40; // flip a payload bit
    write_bytes(dir / "bad.bin", bytes);
    CHECK_THROWS_WITH_AS((void)load_model(dir / "bad.bin"), doctest::Contains("fingerprint"),
                         Error);
}

TEST_CASE("bad magic and kind mismatches are rejected") {
    const auto dir = temp_dir();
    write_bytes(dir / "junk.bin", "NOPE-this-is-not-an-artifact");
    CHECK_THROWS_WITH_AS((void)load_model(dir / "junk.bin"), doctest::Contains("magic"),
                         Error);

    const SequentialModel model = small_model(23);
    save_model(dir / "kind.bin", model, 1);
    CHECK_THROWS_WITH_AS((void)load_dataset(dir / "kind.bin"), doctest::Contains("kind"),
                         Error);
}

TEST_CASE("stored fingerprint matches an independently coded reference hash") {
    const auto dir = temp_dir();
    const SequentialModel model = small_model(29);
    save_model(dir / "fnv.bin", model, 1);
    const std::string bytes = read_bytes(dir / "fnv.bin");

    // header layout: magic(4) version(4) kind(4) seed(8) fingerprint(8)
    // creator(4+n) payload_size(8) payload
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + 20, 8);
    std::uint32_t creator_len;
    std::memcpy(&creator_len, bytes.data() + 28, 4);
    const std::size_t payload_off = 32 + creator_len + 8;
    const std::uint64_t oracle = fnv_oracle(
        reinterpret_cast<const unsigned char*>(bytes.data()) + payload_off,
        bytes.size() - payload_off);
    CHECK(stored == oracle);
}

TEST_CASE("csv writer quotes per RFC 4180 and insists on a header") {
    const auto dir = temp_dir();
    {
        CsvWriter w(dir / "t.csv");
        const std::vector<std::string> h{"name", "value"};
        w.header(h);
        const std::vector<std::string> r1{"plain", "1.5"};
        const std::vector<std::string> r2{"with,comma", "say \"hi\""};
        const std::vector<std::string> r3{"multi\nline", CsvWriter::field(0.1)};
        w.row(r1);
        w.row(r2);
        w.row(r3);
        w.close();
    }
    const std::string text = read_bytes(dir / "t.csv");
    CHECK(text ==
          "name,value\n"
          "plain,1.5\n"
          "\"with,comma\",\"say \"\"hi\"\"\"\n"
          "\"multi\nline\",0.10000000000000001\n");

    CsvWriter bad(dir / "bad.csv");
    const std::vector<std::string> row{"x"};
    CHECK_THROWS_AS(bad.row(row), Error);
    const std::vector<std::string> h{"a"};
    bad.header(h);
    bad.row(row);
}
