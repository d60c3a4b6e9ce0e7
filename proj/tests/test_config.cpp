#include <gtest/gtest.h>

#include <fstream>

#include "radvit/config.hpp"
#include "radvit/error.hpp"
#include "test_util.hpp"

using namespace radvit;

namespace {

std::string usage_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const UsageError& e) {
    return e.what();
  }
  return "<no UsageError>";
}

}  // namespace

TEST(Presets, BaseTableColumn) {
  const auto c = preset("2d-b");
  EXPECT_DOUBLE_EQ(c.stochastic_drop_path_rate, 0.3);
  EXPECT_EQ(c.global_crop_size, 224);
  EXPECT_EQ(c.global_crop_number, 2);
  EXPECT_EQ(c.local_crop_size, 98);
  EXPECT_EQ(c.local_crop_number, 8);
  EXPECT_EQ(c.dino_head_prototypes, 65536);
  EXPECT_EQ(c.dino_head_dim, 256);
  EXPECT_EQ(c.ibot_head_prototypes, 65536);
  EXPECT_EQ(c.ibot_head_dim, 256);
  EXPECT_EQ(c.masking_ratio, (std::array<double, 2>{0.1, 0.5}));
  EXPECT_FALSE(c.shared_head);
  EXPECT_EQ(c.batch_size, 2048);
  EXPECT_EQ(c.total_iterations, 125000);
  EXPECT_EQ(c.warmup_iterations, 12500);
  EXPECT_EQ(c.learning_rate, (std::array<double, 3>{0.0, 0.001, 1e-6}));
  EXPECT_DOUBLE_EQ(c.weight_decay, 0.04);
}

TEST(Presets, LargeAndGiantColumn) {
  for (const char* name : {"2d-l", "2d-g"}) {
    const auto c = preset(name);
    EXPECT_DOUBLE_EQ(c.stochastic_drop_path_rate, 0.4);
    EXPECT_EQ(c.dino_head_prototypes, 131072);
    EXPECT_EQ(c.dino_head_dim, 384);
    EXPECT_EQ(c.ibot_head_prototypes, 131072);
    EXPECT_EQ(c.ibot_head_dim, 256);
    EXPECT_EQ(c.batch_size, 1024);
    EXPECT_EQ(c.total_iterations, 625000);
    EXPECT_EQ(c.warmup_iterations, 100000);
    EXPECT_EQ(c.learning_rate, (std::array<double, 3>{0.0, 0.0002, 1e-6}));
  }
  EXPECT_EQ(preset("2d-l").backbone().embed_dim, 1024);
  EXPECT_EQ(preset("2d-g").backbone().blocks, 40);
}

TEST(Presets, VolumetricColumn) {
  for (const char* name : {"3d-b", "3d-l", "3d-g"}) {
    const auto c = preset(name);
    EXPECT_DOUBLE_EQ(c.stochastic_drop_path_rate, 0.3);
    EXPECT_EQ(c.global_crop_size, 96);
    EXPECT_EQ(c.local_crop_size, 48);
    EXPECT_EQ(c.local_crop_number, 8);
    EXPECT_EQ(c.dino_head_prototypes, 65536);
    EXPECT_EQ(c.batch_size, 1024);
    EXPECT_EQ(c.total_iterations, 90000);
    EXPECT_EQ(c.warmup_iterations, 3000);
    EXPECT_EQ(c.learning_rate, (std::array<double, 3>{0.0, 0.0002, 1e-6}));
    const auto b = c.backbone();
    EXPECT_EQ(b.input_rank, 3);
    EXPECT_EQ(b.patch_size, 16);
    EXPECT_EQ(b.base_grid, 6);
  }
}

TEST(Presets, AllNamesValidate) {
  for (const auto& name : preset_names()) EXPECT_NO_THROW(preset(name).validate()) << name;
  EXPECT_THROW(preset("2d-x"), UsageError);
}

TEST(Presets, EngineCarriesSchedule) {
  const auto e = preset("2d-b").engine();
  EXPECT_EQ(e.schedule.total_iters, 125000);
  EXPECT_EQ(e.schedule.warmup_iters, 12500);
  EXPECT_DOUBLE_EQ(e.schedule.lr_peak, 1e-3);
  EXPECT_DOUBLE_EQ(e.schedule.tau_student, 0.1);
  EXPECT_DOUBLE_EQ(e.schedule.tau_teacher, 0.07);
  EXPECT_EQ(e.sinkhorn_iters, 3);
  EXPECT_EQ(e.dino_head.prototypes, 65536);
  EXPECT_EQ(e.backbone.base_grid, 16);
}

TEST(Overrides, ParseForms) {
  EXPECT_EQ(parse_override("batch_size=8").second, nlohmann::json(8));
  EXPECT_EQ(parse_override("variant=L").second, nlohmann::json("L"));
  EXPECT_EQ(parse_override("masking_ratio=[0.2,0.4]").second, nlohmann::json({0.2, 0.4}));
  EXPECT_EQ(parse_override("centering=false").second, nlohmann::json(false));
  EXPECT_THROW(parse_override("batch_size"), UsageError);
  EXPECT_THROW(parse_override("=3"), UsageError);
}

TEST(Overrides, ResolutionOrder) {
  testutil::TempDir dir;
  const auto file = dir.path / "c.json";
  write_json_file(file, {{"preset", "toy-2d"}, {"batch_size", 4}, {"seed", 9}});
  const auto c = resolve_config(file, {"batch_size=8"});
  EXPECT_EQ(c.preset, "toy-2d");
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.embed_dim, 32);
  EXPECT_EQ(resolve_config(std::nullopt, {"batch_size=8"}).total_iterations, 125000);
  EXPECT_EQ(resolve_config(std::nullopt, {"preset=3d-b"}).input_rank, 3);
}

TEST(Overrides, UnknownKeyAndTypeErrorsNamed) {
  EXPECT_NE(usage_message([] { resolve_config(std::nullopt, {"bogus_key=1"}); }).find("bogus_key"),
            std::string::npos);
  EXPECT_NE(usage_message([] { resolve_config(std::nullopt, {"batch_size=\"many\""}); }).find("batch_size"),
            std::string::npos);
  EXPECT_NE(usage_message([] { resolve_config(std::nullopt, {"masking_ratio=[0.1]"}); }).find("masking_ratio"),
            std::string::npos);
  EXPECT_THROW(resolve_config(std::nullopt, {"seed=-1"}), UsageError);
}

TEST(Json, RoundTripAndHash) {
  for (const auto& name : preset_names()) {
    const auto c = preset(name);
    TrainConfig back;
    back.apply(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json()) << name;
    EXPECT_EQ(back.hash(), c.hash());
  }
  auto c = preset("toy-2d");
  const auto h = c.hash();
  c.seed = 1;
  EXPECT_NE(c.hash(), h);
}

TEST(Json, FileErrors) {
  testutil::TempDir dir;
  EXPECT_ANY_THROW(read_json_file(dir.path / "missing.json"));
  const auto bad = dir.path / "bad.json";
  std::ofstream(bad) << "[1, 2]";
  EXPECT_THROW(resolve_config(bad, {}), UsageError);
}

TEST(Validate, RejectsInconsistentSettings) {
  auto c = preset("toy-2d");
  c.warmup_iterations = c.total_iterations + 1;
  EXPECT_THROW(c.validate(), UsageError);
  c = preset("toy-2d");
  c.global_crop_size = 30;
  EXPECT_THROW(c.validate(), UsageError);
  c = preset("toy-2d");
  c.masking_ratio = {0.6, 0.5};
  EXPECT_THROW(c.validate(), UsageError);
}
