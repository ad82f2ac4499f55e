#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace cylseg {

// K x K counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  ConfusionMatrix(int num_classes, int32_t ignore_id);

  // Pairs whose truth is ignore_id are skipped. Any other id outside [0, K)
  // throws.
  void update(std::span<const int32_t> truth, std::span<const int32_t> pred);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return k_; }
  int32_t ignore_id() const { return ignore_; }
  uint64_t at(int truth, int pred) const { return counts_[truth * k_ + pred]; }
  const std::vector<uint64_t>& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int k_;
  int32_t ignore_;
  std::vector<uint64_t> counts_;
};

struct MiouResult {
  // Per class; empty when the class has no TP, FP or FN.
  std::vector<std::optional<double>> iou;
  // Mean over classes with a value; empty when every class is empty.
  std::optional<double> miou;
};

MiouResult compute_miou(const ConfusionMatrix& cm);

// Percentages with one decimal, one line per class plus the mean.
void print_iou_table(std::ostream& out, const MiouResult& r,
                     std::span<const std::string> class_names = {});

}  // namespace cylseg
