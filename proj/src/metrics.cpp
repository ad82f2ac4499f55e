#include "cylseg/metrics.hpp"

#include <iomanip>
#include <sstream>

#include "cylseg/common.hpp"

namespace cylseg {

ConfusionMatrix::ConfusionMatrix(int num_classes, int32_t ignore_id)
    : k_(num_classes), ignore_(ignore_id) {
  if (num_classes < 1) throw ShapeError("confusion matrix needs K >= 1");
  counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

void ConfusionMatrix::update(std::span<const int32_t> truth, std::span<const int32_t> pred) {
  if (truth.size() != pred.size()) {
    throw ShapeError("truth and prediction lengths differ");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == ignore_) continue;
    if (truth[i] < 0 || truth[i] >= k_ || pred[i] < 0 || pred[i] >= k_) {
      throw ShapeError("class id out of range at index " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(truth[i]) * k_ + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different K");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

MiouResult compute_miou(const ConfusionMatrix& cm) {
  const int k = cm.num_classes();
  MiouResult r;
  r.iou.resize(k);
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    uint64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const uint64_t tp = cm.at(c, c);
    const uint64_t denom = row + col - tp;  // TP + FP + FN
    if (denom == 0) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *r.iou[c];
    ++counted;
  }
  if (counted > 0) r.miou = sum / counted;
  return r;
}

void print_iou_table(std::ostream& out, const MiouResult& r,
                     std::span<const std::string> class_names) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1);
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    const std::string name =
        c < class_names.size() ? class_names[c] : "class_" + std::to_string(c);
    s << std::left << std::setw(20) << name << ' ';
    if (r.iou[c]) {
      s << std::right << std::setw(6) << 100.0 * *r.iou[c] << '\n';
    } else {
      s << std::right << std::setw(6) << "n/a" << "  (absent; excluded from mean)\n";
    }
  }
  s << std::left << std::setw(20) << "mIoU" << ' ';
  if (r.miou) {
    s << std::right << std::setw(6) << 100.0 * *r.miou << '\n';
  } else {
    s << std::right << std::setw(6) << "n/a" << '\n';
  }
  out << s.str();
}

}  // namespace cylseg
