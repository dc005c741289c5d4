#include "aunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace aunet {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(master) ^ a) ^ (b * 0xD6E8FEB86659FD93ULL));
}

void SynthConfig::validate() const {
  if (subjects < 1 || sessions < 1 || frames < 1) throw std::invalid_argument("synth: counts must be positive");
  if (image.height < 16 || image.width < 16) throw std::invalid_argument("synth: images must be at least 16x16");
  if (prevalence.size() != aus.size()) throw std::invalid_argument("synth: one prevalence per AU required");
  for (double p : prevalence)
    if (!(p > 0 && p < 1)) throw std::invalid_argument("synth: prevalence must lie in (0,1)");
  for (int au : aus)
    if (default_rule_table().regions_for_au(au).empty())
      throw std::invalid_argument("synth: AU" + std::to_string(au) + " has no region in the rule table");
  if (!(persistence >= 0 && persistence < 1)) throw std::invalid_argument("synth: persistence must lie in [0,1)");
  if (!(max_step > 0 && max_step < 0.2)) throw std::invalid_argument("synth: max_step must lie in (0,0.2)");
  if (!(amplitude_floor >= 0 && amplitude_floor <= 1)) throw std::invalid_argument("synth: amplitude_floor in [0,1]");
  if (!(occlusion_rate >= 0 && occlusion_rate < 1)) throw std::invalid_argument("synth: occlusion_rate in [0,1)");
  if (noise_sigma < 0 || head_motion < 0 || amplitude <= 0) throw std::invalid_argument("synth: bad noise settings");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"subjects", c.subjects},
          {"sessions", c.sessions},
          {"frames", c.frames},
          {"image_size", {c.image.height, c.image.width}},
          {"aus", c.aus},
          {"prevalence", c.prevalence},
          {"persistence", c.persistence},
          {"sharpness", c.sharpness},
          {"max_step", c.max_step},
          {"shared_weight", c.shared_weight},
          {"amplitude", c.amplitude},
          {"amplitude_floor", c.amplitude_floor},
          {"noise_sigma", c.noise_sigma},
          {"head_motion", c.head_motion},
          {"occlusion_rate", c.occlusion_rate}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  for (const auto& [key, _] : j.items()) {
    if (!to_json(c).contains(key)) throw std::invalid_argument("synth config: unknown key '" + key + "'");
  }
  c.subjects = j.value("subjects", c.subjects);
  c.sessions = j.value("sessions", c.sessions);
  c.frames = j.value("frames", c.frames);
  if (j.contains("image_size")) c.image = {j.at("image_size").at(0).get<Index>(), j.at("image_size").at(1).get<Index>()};
  if (j.contains("aus")) c.aus = j.at("aus").get<std::vector<int>>();
  if (j.contains("prevalence")) c.prevalence = j.at("prevalence").get<std::vector<double>>();
  c.persistence = j.value("persistence", c.persistence);
  c.sharpness = j.value("sharpness", c.sharpness);
  c.max_step = j.value("max_step", c.max_step);
  c.shared_weight = j.value("shared_weight", c.shared_weight);
  c.amplitude = j.value("amplitude", c.amplitude);
  c.amplitude_floor = j.value("amplitude_floor", c.amplitude_floor);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.head_motion = j.value("head_motion", c.head_motion);
  c.occlusion_rate = j.value("occlusion_rate", c.occlusion_rate);
  return c;
}

const std::vector<std::pair<int, int>>& correlated_au_pairs() {
  static const std::vector<std::pair<int, int>> pairs{{6, 12}, {1, 2}};
  return pairs;
}

const LandmarkSet& unit_face_template() {
  static const LandmarkSet face = [] {
    std::vector<Point> p(68);
    for (int i = 0; i <= 16; ++i) {
      const double t = std::numbers::pi - std::numbers::pi * i / 16.0;
      p[static_cast<std::size_t>(i)] = {0.5 + 0.42 * std::cos(t), 0.45 + 0.50 * std::sin(t)};
    }
    const double brow_x[5] = {0.20, 0.26, 0.32, 0.38, 0.44};
    const double brow_y[5] = {0.31, 0.29, 0.28, 0.29, 0.31};
    for (int i = 0; i < 5; ++i) {
      p[static_cast<std::size_t>(17 + i)] = {brow_x[i], brow_y[i]};
      p[static_cast<std::size_t>(26 - i)] = {1.0 - brow_x[i], brow_y[i]};
    }
    p[27] = {0.5, 0.40};
    p[28] = {0.5, 0.47};
    p[29] = {0.5, 0.53};
    p[30] = {0.5, 0.60};
    p[31] = {0.43, 0.64};
    p[32] = {0.465, 0.655};
    p[33] = {0.5, 0.66};
    p[34] = {0.535, 0.655};
    p[35] = {0.57, 0.64};
    const Point right_eye[6] = {{0.26, 0.42}, {0.30, 0.40}, {0.36, 0.40}, {0.40, 0.42}, {0.36, 0.44}, {0.30, 0.44}};
    for (int i = 0; i < 6; ++i) p[static_cast<std::size_t>(36 + i)] = right_eye[i];
    const auto& perm = mirror_permutation_68();
    for (int i = 36; i < 42; ++i) {
      const Point q = p[static_cast<std::size_t>(i)];
      p[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = {1.0 - q.x, q.y};
    }
    const Point outer[12] = {{0.36, 0.76}, {0.41, 0.73}, {0.46, 0.72}, {0.5, 0.725}, {0.54, 0.72}, {0.59, 0.73},
                             {0.64, 0.76}, {0.59, 0.80}, {0.54, 0.82}, {0.5, 0.825}, {0.46, 0.82}, {0.41, 0.80}};
    for (int i = 0; i < 12; ++i) p[static_cast<std::size_t>(48 + i)] = outer[i];
    const Point inner[8] = {{0.39, 0.76}, {0.46, 0.75}, {0.5, 0.75}, {0.54, 0.75},
                            {0.61, 0.76}, {0.54, 0.78}, {0.5, 0.78}, {0.46, 0.78}};
    for (int i = 0; i < 8; ++i) p[static_cast<std::size_t>(60 + i)] = inner[i];
    return LandmarkSet{std::move(p)};
  }();
  return face;
}

namespace {

struct PatternShape {
  double sign;
  double sigma_x;  // inter-ocular units
  double sigma_y;
  double lobe_dx = 0;  // > 0: two lobes at +-lobe_dx (inter-ocular units) instead of one
};

PatternShape pattern_for(int au) {
  switch (au) {
    case 1: return {+1, 0.08, 0.08};
    case 2: return {-1, 0.14, 0.06};
    case 4: return {-1, 0.05, 0.12};
    case 6: return {+1, 0.10, 0.10};
    case 7: return {-1, 0.12, 0.05};
    case 10: return {+1, 0.12, 0.05};
    case 12: return {+1, 0.08, 0.08};
    case 14: return {-1, 0.05, 0.10};
    case 15: return {-1, 0.08, 0.08};
    case 17: return {+1, 0.10, 0.10};
    case 23: return {-1, 0.06, 0.05, 0.12};
    case 24: return {+1, 0.07, 0.12};
    default: return {au % 2 ? +1.0 : -1.0, 0.08, 0.08};
  }
}

// Adds a * exp(-(dx²/2sx² + dy²/2sy²)) around (cx, cy), truncated at 3 sigma.
void splat(Eigen::ArrayXd& img, ImageSize size, double cx, double cy, double sx, double sy, double a) {
  const auto r0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - 3 * sy)));
  const auto r1 = std::min<Index>(size.height - 1, static_cast<Index>(std::ceil(cy + 3 * sy)));
  const auto c0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - 3 * sx)));
  const auto c1 = std::min<Index>(size.width - 1, static_cast<Index>(std::ceil(cx + 3 * sx)));
  for (Index r = r0; r <= r1; ++r) {
    for (Index c = c0; c <= c1; ++c) {
      const double dx = (static_cast<double>(c) - cx) / sx;
      const double dy = (static_cast<double>(r) - cy) / sy;
      img[r * size.width + c] += a * std::exp(-0.5 * (dx * dx + dy * dy));
    }
  }
}

double normal_quantile(double p) {
  double lo = -10, hi = 10;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::numbers::sqrt2) < p) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

void shift_points(LandmarkSet& l, std::initializer_list<int> idx, double dx, double dy) {
  for (int i : idx) {
    l.points[static_cast<std::size_t>(i)].x += dx;
    l.points[static_cast<std::size_t>(i)].y += dy;
  }
}

// Small geometric deformations that accompany active AUs.
LandmarkSet deform(const LandmarkSet& base, const std::vector<int>& aus, const std::vector<double>& latent, double iod) {
  LandmarkSet l = base;
  for (std::size_t a = 0; a < aus.size(); ++a) {
    const double m = latent[a] * iod;
    switch (aus[a]) {
      case 1: shift_points(l, {20, 21, 22, 23}, 0, -0.04 * m); break;
      case 2: shift_points(l, {17, 18, 25, 26}, 0, -0.04 * m); break;
      case 4: shift_points(l, {19, 20, 21, 22, 23, 24}, 0, 0.03 * m); break;
      case 12:
        shift_points(l, {48}, -0.03 * m, -0.02 * m);
        shift_points(l, {54}, 0.03 * m, -0.02 * m);
        break;
      case 15: shift_points(l, {48, 54}, 0, 0.03 * m); break;
      case 17: shift_points(l, {56, 57, 58}, 0, -0.02 * m); break;
      default: break;
    }
  }
  return l;
}

}  // namespace

Eigen::ArrayXd render_face(const LandmarkSet& landmarks, double skin, ImageSize image) {
  const double background = 0.15;
  Eigen::ArrayXd img = Eigen::ArrayXd::Constant(image.height * image.width, background);
  const auto& p = landmarks.points;
  const double cx = 0.5 * (p[0].x + p[16].x);
  const double rx = 0.5 * (p[16].x - p[0].x) + 1.0;
  const double top = 0.5 * (p[19].y + p[24].y) - 0.12 * (p[8].y - p[27].y);
  const double cy = 0.5 * (top + p[8].y);
  const double ry = 0.5 * (p[8].y - top) + 1.0;
  for (Index r = 0; r < image.height; ++r) {
    for (Index c = 0; c < image.width; ++c) {
      const double dx = (static_cast<double>(c) - cx) / rx;
      const double dy = (static_cast<double>(r) - cy) / ry;
      const double rad = std::sqrt(dx * dx + dy * dy);
      img[r * image.width + c] += (skin - background) / (1.0 + std::exp(-8.0 * (1.0 - rad)));
    }
  }
  auto dots = [&](int from, int to, double a) {
    for (int i = from; i <= to; ++i) splat(img, image, p[static_cast<std::size_t>(i)].x, p[static_cast<std::size_t>(i)].y, 0.9, 0.9, a);
  };
  dots(17, 26, -0.12);
  dots(31, 35, -0.05);
  dots(36, 47, -0.12);
  dots(48, 59, -0.10);
  return img;
}

Eigen::ArrayXd render_au_pattern(int au, const LandmarkSet& landmarks, ImageSize image, const RuleTable& rules) {
  Eigen::ArrayXd img = Eigen::ArrayXd::Zero(image.height * image.width);
  const RoiCenterSet centers = compute_au_centers(landmarks, rules, image);
  const double iod = inter_ocular_distance(landmarks, rules);
  const PatternShape shape = pattern_for(au);
  for (int k : rules.regions_for_au(au)) {
    const Point c = centers[static_cast<std::size_t>(k)];
    const double sx = std::max(0.6, shape.sigma_x * iod);
    const double sy = std::max(0.6, shape.sigma_y * iod);
    if (shape.lobe_dx > 0) {
      splat(img, image, c.x - shape.lobe_dx * iod, c.y, sx, sy, shape.sign);
      splat(img, image, c.x + shape.lobe_dx * iod, c.y, sx, sy, shape.sign);
    } else {
      splat(img, image, c.x, c.y, sx, sy, shape.sign);
    }
  }
  return img;
}

SyntheticDataset generate_synthetic(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  SyntheticDataset out;
  Dataset& data = out.data;
  data.image = config.image;
  data.aus = config.aus;
  data.schema_size = kDefaultSchemaSize;
  const std::size_t num_aus = config.aus.size();
  const double W = static_cast<double>(config.image.width);
  const double H = static_cast<double>(config.image.height);

  std::vector<double> quantile(num_aus);
  for (std::size_t a = 0; a < num_aus; ++a) quantile[a] = normal_quantile(1.0 - config.prevalence[a]);

  // driver_of[a] = index of the shared driver, or -1.
  std::vector<int> driver_of(num_aus, -1);
  const auto& pairs = correlated_au_pairs();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    for (std::size_t a = 0; a < num_aus; ++a) {
      if (config.aus[a] == pairs[k].first || config.aus[a] == pairs[k].second) driver_of[a] = static_cast<int>(k);
    }
  }

  for (int s = 1; s <= config.subjects; ++s) {
    std::mt19937_64 srng(derive_seed(seed, static_cast<std::uint64_t>(s), 0));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, 0.4);
    SubjectAppearance look;
    const double face = (0.85 + 0.15 * unit(srng)) * W;
    const double ox = 0.5 * (W - face) + (unit(srng) * 4.0 - 2.0);
    const double oy = 0.5 * (H - face) + (unit(srng) * 4.0 - 2.0);
    look.skin = 0.5 + 0.1 * unit(srng);
    for (const Point& u : unit_face_template().points) {
      look.template_landmarks.points.push_back({ox + u.x * face + jitter(srng), oy + u.y * face + jitter(srng)});
    }
    out.appearance[s] = look;
    const double iod = inter_ocular_distance(look.template_landmarks, default_rule_table());

    for (int e = 1; e <= config.sessions; ++e) {
      std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(e)));
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::uniform_real_distribution<double> contrast(config.amplitude_floor, 1.0);
      // Separate stream so the occlusion rate leaves every other draw unchanged.
      std::mt19937_64 occ_rng(derive_seed(seed, static_cast<std::uint64_t>(s), 1000 + static_cast<std::uint64_t>(e)));
      std::bernoulli_distribution occluded(config.occlusion_rate);
      const double rho = config.persistence;
      const double innov = std::sqrt(1.0 - rho * rho);
      std::vector<double> own(num_aus), shared(pairs.size()), latent(num_aus);
      for (auto& z : own) z = gauss(rng);
      for (auto& z : shared) z = gauss(rng);
      double hx = 0, hy = 0;
      for (int f = 0; f < config.frames; ++f) {
        if (f > 0) {
          for (auto& z : own) z = rho * z + innov * gauss(rng);
          for (auto& z : shared) z = rho * z + innov * gauss(rng);
          hx = std::clamp(hx + 0.3 * gauss(rng), -config.head_motion, config.head_motion);
          hy = std::clamp(hy + 0.3 * gauss(rng), -config.head_motion, config.head_motion);
        }
        for (std::size_t a = 0; a < num_aus; ++a) {
          double z = own[a];
          if (driver_of[a] >= 0) {
            const double w = config.shared_weight;
            z = w * shared[static_cast<std::size_t>(driver_of[a])] + std::sqrt(1.0 - w * w) * own[a];
          }
          const double target = 1.0 / (1.0 + std::exp(-config.sharpness * (z - quantile[a])));
          latent[a] = f == 0 ? target : latent[a] + std::clamp(target - latent[a], -config.max_step, config.max_step);
        }

        FrameRecord rec;
        rec.subject = s;
        rec.session = e;
        rec.frame = f;
        rec.latent = latent;
        rec.labels.resize(num_aus);
        for (std::size_t a = 0; a < num_aus; ++a) rec.labels[a] = latent[a] >= 0.5 ? 1 : 0;

        LandmarkSet lm = deform(look.template_landmarks, config.aus, latent, iod);
        for (auto& p : lm.points) p = clamp_to_image({p.x + hx, p.y + hy}, config.image);
        Eigen::ArrayXd img = render_face(lm, look.skin, config.image);
        const bool hidden = occluded(occ_rng);
        for (std::size_t a = 0; a < num_aus; ++a) {
          const double c = contrast(rng);
          if (!hidden && latent[a] > 1e-3) img += config.amplitude * latent[a] * c * render_au_pattern(config.aus[a], lm, config.image);
        }
        for (Index i = 0; i < img.size(); ++i) img[i] += config.noise_sigma * gauss(rng);
        // Quantize exactly as the PGM writer does so in-memory and on-disk frames agree.
        rec.image = (img.max(0.0).min(1.0) * 255.0).round() / 255.0;
        rec.landmarks = std::move(lm);
        data.frames.push_back(std::move(rec));
      }
    }
  }
  data.reindex();
  return out;
}

}  // namespace aunet
