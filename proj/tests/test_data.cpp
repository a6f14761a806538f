#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "drtune/data.hpp"
#include "drtune/losses.hpp"
#include "drtune/model.hpp"

using namespace drtune;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& contents) {
  const auto dir = std::filesystem::temp_directory_path() / "drtune_test_data";
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  std::ofstream out(path, std::ios::binary);
  out << contents;
  return path;
}

// Trains a linear head directly on raw inputs; enough to verify class
// separability without pulling in the trainer.
double head_only_accuracy(const DatasetSplit& train, const DatasetSplit& test) {
  std::mt19937_64 rng(123);
  LinearHead head = LinearHead::random_init((std::size_t)train.num_classes,
                                            train.dim(), rng);
  SgdState state = SgdState::zeros_like_head(head);
  for (int step = 0; step < 300; ++step) {
    const CeLossResult res = ce_loss(head, train.inputs, train.labels);
    const Matrix dphi = matmul(transpose(res.dlogits), train.inputs);
    sgd_step_head(head, dphi, state, 0.1, 0.0, 0.9);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Vector u = head.logits(test.inputs.row_vector(i));
    std::size_t best = 0;
    for (std::size_t c = 1; c < u.size(); ++c)
      if (u[c] > u[best]) best = c;
    if ((int)best == test.labels[i]) ++correct;
  }
  return (double)correct / (double)test.size();
}

}  // namespace

TEST_CASE("make_gaussian_mixture is deterministic per seed") {
  const DatasetSplit a = make_gaussian_mixture(4, 8, 16, 5.0, 7);
  const DatasetSplit b = make_gaussian_mixture(4, 8, 16, 5.0, 7);
  CHECK(a.inputs.data() == b.inputs.data());
  CHECK(a.labels == b.labels);

  const DatasetSplit c = make_gaussian_mixture(4, 8, 16, 5.0, 8);
  CHECK(a.inputs.data() != c.inputs.data());
}

TEST_CASE("make_gaussian_mixture validates arguments") {
  CHECK_THROWS_AS(make_gaussian_mixture(1, 8, 16, 5.0, 7), Error);
  CHECK_THROWS_AS(make_gaussian_mixture(4, 1, 16, 5.0, 7), Error);
  CHECK_THROWS_AS(make_gaussian_mixture(4, 8, 0, 5.0, 7), Error);
}

TEST_CASE("separation 20 is linearly separable; separation 0 is chance") {
  const DatasetSplit wide = make_gaussian_mixture(4, 8, 150, 20.0, 9);
  const auto [wide_train, wide_test] = split_train_test(wide, 100);
  CHECK(head_only_accuracy(wide_train, wide_test) > 0.99);

  const DatasetSplit flat = make_gaussian_mixture(4, 8, 150, 0.0, 9);
  const auto [flat_train, flat_test] = split_train_test(flat, 100);
  const double acc = head_only_accuracy(flat_train, flat_test);
  CHECK(acc < 0.40);  // four classes, chance is 0.25
}

TEST_CASE("split_train_test keeps classes balanced and disjoint") {
  const DatasetSplit ds = make_gaussian_mixture(3, 4, 10, 2.0, 11);
  const auto [train, test] = split_train_test(ds, 6);
  CHECK(train.size() == 18);
  CHECK(test.size() == 12);
  std::vector<int> train_counts(3, 0), test_counts(3, 0);
  for (int y : train.labels) ++train_counts[(std::size_t)y];
  for (int y : test.labels) ++test_counts[(std::size_t)y];
  CHECK(train_counts == std::vector<int>{6, 6, 6});
  CHECK(test_counts == std::vector<int>{4, 4, 4});
}

TEST_CASE("make_drifted_pair identity drift leaves features unchanged") {
  const DatasetSplit base = make_gaussian_mixture(3, 4, 8, 3.0, 13);
  DriftSpec spec;
  spec.rotation = Matrix::identity(4);
  spec.offsets.assign(3, Vector(4, 0.0));
  spec.noise_sigma = 0.0;
  const DriftedPair pair = make_drifted_pair(base, spec, 14);
  CHECK(pair.pretrained.data() == pair.downstream.data());
  CHECK(pair.pretrained.data() == base.inputs.data());
}

TEST_CASE("make_drifted_pair applies rotation, offsets and noise") {
  const DatasetSplit base = make_gaussian_mixture(3, 4, 8, 3.0, 15);
  const DriftSpec spec = make_radial_drift(base, 0.4, 0.0, 16);
  const DriftedPair pair = make_drifted_pair(base, spec, 17);
  REQUIRE(pair.size() == base.size());
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const Vector want = add(matvec(spec.rotation, base.inputs.row_vector(i)),
                            spec.offsets[(std::size_t)base.labels[i]]);
    CHECK(norm(sub(pair.downstream.row_vector(i), want)) < 1e-12);
  }

  // index pairing and per-class cardinalities survive
  CHECK(pair.labels == base.labels);

  // noise is seeded and deterministic
  DriftSpec noisy = spec;
  noisy.noise_sigma = 0.05;
  const DriftedPair n1 = make_drifted_pair(base, noisy, 18);
  const DriftedPair n2 = make_drifted_pair(base, noisy, 18);
  CHECK(n1.downstream.data() == n2.downstream.data());
  CHECK(n1.downstream.data() != pair.downstream.data());
}

TEST_CASE("drift spec validates orthogonality") {
  DriftSpec spec;
  spec.rotation = Matrix(2, 2, {2, 0, 0, 1});
  spec.offsets.assign(2, Vector(2, 0.0));
  CHECK_THROWS_AS(spec.validate(), Error);
}

TEST_CASE("csv loader happy path") {
  const auto path = temp_file("ok.csv", "0,1.5,2.5\n1,-0.25,3.0\n2,0,1e-3\n");
  const DatasetSplit ds = load_csv_dataset(path.string(), {3, false});
  CHECK(ds.size() == 3);
  CHECK(ds.dim() == 2);
  CHECK(ds.labels == std::vector<int>{0, 1, 2});
  CHECK(ds.inputs(1, 0) == -0.25);
  CHECK(ds.inputs(2, 1) == 1e-3);
}

TEST_CASE("csv loader reports row and column of bad cells") {
  const auto path = temp_file("bad.csv", "0,1,2,3,4\n1,5,6,7,oops\n");
  try {
    load_csv_dataset(path.string(), {2, false});
    FAIL("expected a parse error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("column 5") != std::string::npos);
    CHECK(e.kind() == ErrorKind::parse);
  }
}

TEST_CASE("dataset validation rejects empty and inconsistent splits") {
  DatasetSplit empty;
  empty.num_classes = 2;
  empty.inputs = Matrix(0, 3);
  CHECK_THROWS_AS(empty.validate(), Error);

  DatasetSplit bad_label;
  bad_label.num_classes = 2;
  bad_label.inputs = Matrix(1, 2, {0.0, 1.0});
  bad_label.labels = {5};
  CHECK_THROWS_AS(bad_label.validate(), Error);
}

TEST_CASE("csv loader rejects non-finite values") {
  const auto path = temp_file("nan.csv", "0,1,2\n1,nan,4\n");
  CHECK_THROWS_AS(load_csv_dataset(path.string(), {2, false}), Error);
  const auto path2 = temp_file("inf.csv", "0,1,2\n1,inf,4\n");
  CHECK_THROWS_AS(load_csv_dataset(path2.string(), {2, false}), Error);
}

TEST_CASE("csv loader label range checks") {
  const auto sparse = temp_file("sparse.csv", "0,1,2\n2,3,4\n");
  const DatasetSplit ok = load_csv_dataset(sparse.string(), {3, false});
  CHECK(ok.labels == std::vector<int>{0, 2});  // label 1 absent is fine

  const auto over = temp_file("over.csv", "0,1,2\n3,3,4\n");
  CHECK_THROWS_AS(load_csv_dataset(over.string(), {3, false}), Error);
}

TEST_CASE("csv loader handles headers, blank lines and ragged rows") {
  const auto with_header = temp_file("hdr.csv", "label,f0,f1\n0,1,2\n1,3,4\n\n");
  const DatasetSplit ds = load_csv_dataset(with_header.string(), {2, true});
  CHECK(ds.size() == 2);

  const auto ragged = temp_file("ragged.csv", "0,1,2\n1,3\n");
  CHECK_THROWS_AS(load_csv_dataset(ragged.string(), {2, false}), Error);

  const auto missing = std::filesystem::temp_directory_path() / "drtune_no_such.csv";
  CHECK_THROWS_AS(load_csv_dataset(missing.string(), {2, false}), Error);
}

TEST_CASE("features csv writer round-trips exactly") {
  std::mt19937_64 rng(19);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix feats(5, 3);
  for (auto& x : feats.data()) x = gauss(rng);
  const std::vector<int> labels = {0, 1, 2, 1, 0};
  const auto path = temp_file("roundtrip.csv", "");
  save_features_csv(path.string(), feats, labels);
  const DatasetSplit back = load_csv_dataset(path.string(), {3, false});
  CHECK(back.inputs.data() == feats.data());
  CHECK(back.labels == labels);
}

TEST_CASE("class_means direct tally") {
  Matrix feats(3, 2, {1, 0, 3, 0, 0, 2});
  const std::vector<int> labels = {0, 0, 2};
  const auto [means, present] = class_means(feats, labels, 3);
  CHECK(means.row_vector(0) == Vector{2, 0});
  CHECK(present[0]);
  CHECK_FALSE(present[1]);
  CHECK(means.row_vector(2) == Vector{0, 2});
}
