#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "nucssl/cli.hpp"
#include "support.hpp"

using namespace nucssl;
using testing_support::TempDir;

namespace {

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun run(std::vector<std::string> args) {
    args.insert(args.begin(), "nucssl");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

void write_text(const std::filesystem::path& p, const std::string& s) { std::ofstream(p) << s; }

// Tiny end-to-end config: few images, few steps, narrow encoder.
std::string tiny_config(const std::filesystem::path& data) {
    return "[data]\nroot = " + data.string() +
           "\n[encoder]\nwidth = 2\nembedding_dim = 8\n"
           "[pretrain]\nsteps = 2\nbatch_size = 2\nheldout_pool_size = 4\nlog_every = 1\n"
           "[segmenter]\nboundary_width = 1\n"
           "[finetune]\nepochs = 1\nbatch_size = 2\ncrops_per_image = 1\n"
           "[postprocess]\nmin_instance_area = 2\n"
           "[synth]\nnum_images = 4\nnum_test_images = 2\n";
}

} // namespace

TEST(Cli, Version) {
    const CliRun r = run({"version"});
    EXPECT_EQ(r.code, kExitOk);
    EXPECT_EQ(r.out, std::string("nucssl ") + kVersion + "\n");
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(run({"version", "--bogus"}).code, kExitUsage);
    EXPECT_EQ(run({}).code, kExitUsage);
    EXPECT_EQ(run({"synth"}).code, kExitUsage);  // --out required
    const CliRun help = run({"--help"});
    EXPECT_EQ(help.code, kExitOk);
    EXPECT_NE(help.out.find("pretrain"), std::string::npos);
}

TEST(Cli, ConfigErrorsAndMissingFiles) {
    TempDir tmp;
    write_text(tmp / "bad.ini", "[loss]\nm1 = nope\n");
    EXPECT_EQ(run({"synth", "--config", (tmp / "bad.ini").string(), "--out", (tmp / "d").string()}).code, kExitConfig);
    EXPECT_EQ(run({"synth", "--config", (tmp / "missing.ini").string(), "--out", (tmp / "d").string()}).code, kExitIo);
    EXPECT_EQ(run({"postprocess", "--mask", (tmp / "none.png").string(), "--out", (tmp / "o.png").string()}).code,
              kExitIo);
    EXPECT_EQ(run({"pretrain", "--data", (tmp / "nodata").string(), "--out", (tmp / "p").string()}).code, kExitIo);
}

TEST(Cli, DumpConfigRoundTrips) {
    TempDir tmp;
    write_text(tmp / "c.ini", "[loss]\nm1 = 0.25\n");
    const CliRun a = run({"--config", (tmp / "c.ini").string(), "--dump-config"});
    ASSERT_EQ(a.code, kExitOk);
    EXPECT_NE(a.out.find("m1 = 0.25"), std::string::npos);
    write_text(tmp / "d.ini", a.out);
    const CliRun b = run({"pretrain", "--config", (tmp / "d.ini").string(), "--out", "unused", "--dump-config"});
    ASSERT_EQ(b.code, kExitOk);
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(run({"--dump-config"}).out, dump_config(RunConfig{}));
}

TEST(Cli, PostprocessSubcommand) {
    TempDir tmp;
    TernaryMask m(8, 12);
    for (int y = 1; y < 7; ++y) {
        for (int x = 0; x < 12; ++x) {
            m(y, x) = x == 6 ? 2 : 1;
        }
    }
    write_ternary_mask(tmp / "m.png", m);
    const CliRun r = run({"postprocess", "--mask", (tmp / "m.png").string(), "--out", (tmp / "out" / "l.png").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(read_label_map(tmp / "out" / "l.png"), ternary_to_instances(m));
    EXPECT_TRUE(std::filesystem::exists(tmp / "out" / "l.png.manifest.ini"));

    Plane<std::uint8_t> bad(2, 2, 7);
    write_gray8(tmp / "bad.png", bad);
    EXPECT_EQ(run({"postprocess", "--mask", (tmp / "bad.png").string(), "--out", (tmp / "b.png").string()}).code, kExitIo);
}

TEST(Cli, PipelineWritesReportsAndManifests) {
    TempDir tmp;
    const auto data = tmp / "data";
    write_text(tmp / "c.ini", tiny_config(data));
    const std::string cfg = (tmp / "c.ini").string();

    CliRun r = run({"synth", "--config", cfg, "--out", data.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(std::filesystem::exists(data / "manifest.ini"));

    r = run({"pretrain", "--config", cfg, "--out", (tmp / "pre").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(std::filesystem::exists(tmp / "pre" / "pretrain_report.csv"));
    EXPECT_TRUE(std::filesystem::exists(tmp / "pre" / "encoder.ckpt"));

    // The manifest is itself a loadable config.
    EXPECT_EQ(dump_config(load_config(tmp / "pre" / "manifest.ini")), dump_config(load_config(cfg)));

    EXPECT_EQ(run({"finetune", "--config", cfg, "--out", (tmp / "ft").string()}).code, kExitUsage);
    EXPECT_EQ(run({"finetune", "--config", cfg, "--out", (tmp / "ft").string(), "--from-scratch", "--encoder-ckpt",
                   (tmp / "pre" / "encoder.ckpt").string()})
                  .code,
              kExitUsage);

    r = run({"finetune", "--config", cfg, "--out", (tmp / "ft").string(), "--encoder-ckpt",
             (tmp / "pre" / "encoder.ckpt").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(std::filesystem::exists(tmp / "ft" / "finetune_report.csv"));
    EXPECT_TRUE(std::filesystem::exists(tmp / "ft" / "model.ckpt"));

    r = run({"eval", "--data", data.string(), "--model", (tmp / "ft" / "model.ckpt").string(), "--out",
             (tmp / "ft" / "test.csv").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    std::ifstream csv(tmp / "ft" / "test.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "image_id,aji,dice");
    EXPECT_TRUE(std::filesystem::exists(tmp / "ft" / "test.csv.manifest.ini"));

    EXPECT_EQ(run({"eval", "--data", data.string(), "--model", (tmp / "ft" / "model.ckpt").string(), "--split", "nope",
                   "--out", (tmp / "x.csv").string()})
                  .code,
              kExitConfig);

    // A wider encoder cannot take the pretrained weights.
    std::string wide = tiny_config(data);
    wide.replace(wide.find("width = 2"), 9, "width = 4");
    write_text(tmp / "wide.ini", wide);
    r = run({"finetune", "--config", (tmp / "wide.ini").string(), "--out", (tmp / "ft2").string(), "--encoder-ckpt",
             (tmp / "pre" / "encoder.ckpt").string()});
    EXPECT_EQ(r.code, kExitSchema) << r.err;

    r = run({"eval", "--data", data.string(), "--model", (tmp / "pre" / "encoder.ckpt").string(), "--out",
             (tmp / "y.csv").string()});
    EXPECT_EQ(r.code, kExitSchema) << r.err;
}
