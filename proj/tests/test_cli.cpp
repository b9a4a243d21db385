#include "kvnn/cli.hpp"
#include "kvnn/experiments.hpp"
#include "kvnn/tensor_io.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace kvnn;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kData(KVNN_DATA_DIR);

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("kvnn_test_cli_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("thousands separators") {
    CHECK(with_thousands(0) == "0");
    CHECK(with_thousands(999) == "999");
    CHECK(with_thousands(1000) == "1,000");
    CHECK(with_thousands(14530) == "14,530");
    CHECK(with_thousands(557057) == "557,057");
    CHECK(with_thousands(1234567) == "1,234,567");
}

TEST_CASE("count prints the DnCNN-17 parameter count") {
    const auto r = run({"count", "--topology", (kData / "topologies" / "dncnn17.json").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("557,057") != std::string::npos);
    CHECK(r.out.find("Params (CNN)") != std::string::npos);
    CHECK(r.out.find("Params (kVNN)") != std::string::npos);
    CHECK(r.out.find("GFLOPs") != std::string::npos);
}

TEST_CASE("count json output") {
    const auto r = run({"count", "--json", "--topology", (kData / "topologies" / "kvnn5_c16.json").string(), "--topology",
                        (kData / "topologies" / "cnn7_c16.json").string(), "--height", "32", "--width", "32"});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    CHECK(j.at("height") == 32);
    REQUIRE(j.at("models").size() == 2);
    CHECK(j.at("models")[0].at("params") == 14530);
    CHECK(j.at("models")[0].at("kind") == "kvnn");
    CHECK(j.at("models")[1].at("params") == 11905);
    CHECK(j.at("models")[1].at("kind") == "cnn");
}

TEST_CASE("fit-poly reports a tiny residual") {
    const auto r = run({"fit-poly", "--d", "3", "--r", "2", "--seed", "7"});
    CHECK(r.code == 0);
    CHECK(r.out.find("atoms                       6") != std::string::npos);
    CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("selfcheck passes and writes json") {
    const auto dir = scratch("selfcheck");
    const auto r = run({"selfcheck", "--seed", "3", "--out", dir.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("FAIL") == std::string::npos);
    const auto j = json::parse(slurp(dir / "selfcheck.json"));
    CHECK(j.at("pass") == true);
    CHECK(j.at("seed") == 3);
    CHECK(j.at("checks").size() >= 9);
}

TEST_CASE("usage errors exit nonzero") {
    CHECK(run({}).code == 2);
    CHECK(run({"bogus"}).code == 2);
    CHECK(run({"count", "--nope"}).code == 2);
    const auto r = run({"--json-errors", "fit-poly", "--d", "99"});
    CHECK(r.code == 2);
    const auto j = json::parse(r.err);
    CHECK(j.at("error").at("code") == "usage");
    const auto help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("selfcheck") != std::string::npos);
}

TEST_CASE("runtime errors carry json objects on demand") {
    const auto dir = scratch("bad_config");
    fs::create_directories(dir);
    std::ofstream(dir / "c.json") << R"({"task":"denoise","topology":"missing.json"})";
    const auto r = run({"--json-errors", "train", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()});
    CHECK(r.code == 3);
    const auto j = json::parse(r.err);
    CHECK(j.at("error").at("code") == "io");
    const auto plain = run({"train", "--config", (dir / "c.json").string(), "--out", (dir / "o").string()});
    CHECK(plain.code == 3);
    CHECK(plain.err.rfind("error: ", 0) == 0);
}

TEST_CASE("gen-data writes clean and noisy sets") {
    const auto dir = scratch("gen");
    const auto r = run({"gen-data", "--seed", "5", "--count", "3", "--size", "16", "--sigma", "25", "--out", dir.string()});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "clean" / "img0002.kvt"));
    CHECK(fs::exists(dir / "clean" / "img0002.pgm"));
    CHECK(fs::exists(dir / "noisy" / "img0000.kvt"));
    const auto clean = load_tensor(dir / "clean" / "img0001.kvt");
    const auto expected = gen_synthetic_images(5, 3, 16).images[1];
    CHECK(std::equal(clean.data().begin(), clean.data().end(), expected.data().begin()));
    const auto manifest = json::parse(slurp(dir / "manifest.json"));
    CHECK(manifest.at("seed") == 5);
    CHECK(manifest.at("noise").at("sigma") == 25.0);
}

TEST_CASE("train then eval: eval PSNR equals offline recomputation") {
    const auto dir = scratch("train_eval");
    fs::create_directories(dir);
    auto config = json::parse(slurp(kData / "configs" / "denoise_smoke.json"));
    config["topology"] = (kData / "topologies" / "kvnn5_c16.json").string();
    config["data"] = {{"train_images", 6}, {"test_images", 2}, {"image_size", 16}, {"patch_size", 16}};
    config["training"]["steps"] = 3;
    config["training"]["batch_size"] = 2;
    std::ofstream(dir / "config.json") << config.dump(2);
    const auto t = run({"train", "--config", (dir / "config.json").string(), "--out", (dir / "run").string()});
    REQUIRE(t.code == 0);
    CHECK(t.out.find("denoised PSNR") != std::string::npos);

    run({"gen-data", "--seed", "8", "--count", "2", "--size", "16", "--out", (dir / "images").string()});
    const auto e = run({"eval", "--model", (dir / "run" / "model").string(), "--images",
                        (dir / "images" / "clean").string(), "--sigma", "15", "--out", (dir / "eval").string()});
    REQUIRE(e.code == 0);
    const auto report = json::parse(slurp(dir / "eval" / "eval.json"));
    std::vector<std::string> names;
    for (const auto& item : report.at("per_image")) names.push_back(item.at("name"));
    CHECK(names == std::vector<std::string>{"img0000", "img0001"});
    CHECK(recompute_psnr(dir / "eval" / "predictions", names) == report.at("denoised_psnr").get<double>());
    CHECK(report.at("noise").at("sigma") == 15.0);
}

TEST_CASE("train dispatches classification configs") {
    const auto dir = scratch("classify");
    fs::create_directories(dir);
    auto config = json::parse(slurp(kData / "configs" / "classify_linear.json"));
    config["train_samples"] = 200;
    config["test_samples"] = 100;
    config["training"]["steps"] = 50;
    std::ofstream(dir / "c.json") << config.dump();
    const auto r = run({"train", "--config", (dir / "c.json").string(), "--out", (dir / "run").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("kvnn_p2") != std::string::npos);
    CHECK(fs::exists(dir / "run" / "metrics_p1.csv"));
}

TEST_CASE("krr-baseline reports both counts") {
    const auto r = run({"krr-baseline", "--d", "4", "--n", "80", "--seed", "2"});
    CHECK(r.code == 0);
    CHECK(r.out.find("stored KRR centers          80") != std::string::npos);
    CHECK(r.out.find("bound C(d+1, 2) = 10") != std::string::npos);
}
